//! Experimental harness: stress-test dataset synthesis, ranking metrics,
//! descriptor-orthogonality diagnostics and wall-clock timing of the scoring
//! strategies.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorModel;
use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place, Mat};
use crate::retrieval::{
    aggregate_query, build_element_index, build_set_index, make_query_descriptors,
    pipeline_aggregate, query_element_descriptors, rerank, score_desc_per_element_topk,
    score_desc_per_set_topk, score_pretag, ElementIndex, MatchAlgo, QueryIdentity, QuerySpec,
    RankedResult, SetIndex, SetRecord, TagIndex,
};
use crate::scalar::{from_f64, Real};
use crate::synth::{sample_element_with, IdentityPrototype};
use crate::whitening::StagedWhitening;

type Model = AggregatorModel<f64>;
type Whitening = StagedWhitening<f64>;

// ------------------------------------------------------------------
// Ranking metrics
// ------------------------------------------------------------------

/// Discounted cumulative gain over the top `n` ranks:
/// `sum_i (2^rel(i) - 1) / log2(i + 1)`, list padded with zero relevance.
pub fn dcg_at_n(relevances_in_rank_order: &[u32], n: usize) -> f64 {
    relevances_in_rank_order
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, rel)| (2f64.powi(*rel as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Relevance judgments of one query: sets absent from the map have
/// relevance zero.
#[derive(Debug, Clone, Default)]
pub struct QueryJudgments {
    pub identities: Vec<u64>,
    pub relevant: HashMap<String, u32>,
}

impl QueryJudgments {
    pub fn relevance(&self, set_id: &str) -> u32 {
        self.relevant.get(set_id).copied().unwrap_or(0)
    }

    /// Ideal DCG: relevances sorted descending (zeros contribute nothing).
    pub fn ideal_dcg(&self, n: usize) -> f64 {
        let mut rels: Vec<u32> = self.relevant.values().copied().collect();
        rels.sort_unstable_by(|a, b| b.cmp(a));
        dcg_at_n(&rels, n)
    }
}

/// Normalized DCG as a percentage in [0, 100]. A vacuous query (zero ideal
/// DCG) scores 100.
pub fn ndcg_at_n(ranking: &RankedResult, judgments: &QueryJudgments, n: usize) -> f64 {
    let ideal = judgments.ideal_dcg(n);
    if ideal <= 0.0 {
        return 100.0;
    }
    let rels: Vec<u32> = ranking
        .entries
        .iter()
        .take(n)
        .map(|(id, _)| judgments.relevance(id))
        .collect();
    100.0 * dcg_at_n(&rels, n) / ideal
}

/// Judgments for a whole query list.
#[derive(Debug, Clone, Default)]
pub struct Judgments {
    pub queries: Vec<QueryJudgments>,
}

#[derive(Serialize, Deserialize)]
struct JudgmentRecord {
    query: Vec<u64>,
    relevant: Vec<(String, u32)>,
}

impl Judgments {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for q in &self.queries {
            let mut relevant: Vec<(String, u32)> = q
                .relevant
                .iter()
                .map(|(id, rel)| (id.clone(), *rel))
                .collect();
            relevant.sort();
            let rec = JudgmentRecord {
                query: q.identities.clone(),
                relevant,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut queries = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JudgmentRecord = serde_json::from_str(&line)?;
            queries.push(QueryJudgments {
                identities: rec.query,
                relevant: rec.relevant.into_iter().collect(),
            });
        }
        Ok(Judgments { queries })
    }
}

// ------------------------------------------------------------------
// Stress-test synthesis
// ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressConfig {
    pub n_sets: usize,
    pub identities_per_set: usize,
    /// Distractor elements added per set, one dataset per entry.
    pub distractor_counts: Vec<usize>,
    pub n_queries: usize,
    pub identities_per_query: usize,
    pub repeats: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        StressConfig {
            n_sets: 8000,
            identities_per_set: 2,
            distractor_counts: vec![0, 1, 2, 3],
            n_queries: 100,
            identities_per_query: 2,
            repeats: 10,
            noise_sigma: 0.25,
            seed: 1,
        }
    }
}

impl StressConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sets == 0 || self.n_queries == 0 || self.repeats == 0 {
            return Err(Error::InvalidArgument("empty stress configuration".into()));
        }
        if self.identities_per_set < 1 {
            return Err(Error::InvalidArgument("identities_per_set must be >= 1".into()));
        }
        if self.identities_per_query != self.identities_per_set {
            return Err(Error::InvalidArgument(
                "queries are sampled from realized set identity tuples, so \
                 identities_per_query must equal identities_per_set"
                    .into(),
            ));
        }
        if self.distractor_counts.is_empty() {
            return Err(Error::InvalidArgument("need at least one distractor count".into()));
        }
        Ok(())
    }
}

/// One stress dataset: the base sets plus `distractors` unlabeled elements.
#[derive(Debug, Clone)]
pub struct StressDataset {
    pub distractors: usize,
    pub sets: Vec<SetRecord>,
}

/// Stress bench: datasets of increasing difficulty, query identity tuples,
/// and relevance judgments (identical across the datasets by construction).
#[derive(Debug, Clone)]
pub struct StressBench {
    pub datasets: Vec<StressDataset>,
    pub queries: Vec<Vec<u64>>,
    pub judgments: Judgments,
}

/// Synthesize the stress datasets: a base collection of
/// `identities_per_set`-identity sets, variants with extra distractor
/// elements, queries drawn from identity tuples that co-occur in some set,
/// and judgments counting query identities per set.
pub fn synth_stress_datasets(
    gallery: &[IdentityPrototype<f64>],
    distractor_pool: &[IdentityPrototype<f64>],
    cfg: &StressConfig,
) -> Result<StressBench> {
    cfg.validate()?;
    if gallery.len() < cfg.identities_per_set {
        return Err(Error::InvalidArgument("gallery too small for set synthesis".into()));
    }
    let needs_distractors = cfg.distractor_counts.iter().any(|d| *d > 0);
    if needs_distractors && distractor_pool.is_empty() {
        return Err(Error::InvalidArgument("empty distractor pool".into()));
    }
    {
        let labelled: std::collections::HashSet<u64> = gallery.iter().map(|p| p.id).collect();
        if distractor_pool.iter().any(|p| labelled.contains(&p.id)) {
            return Err(Error::InvalidArgument(
                "gallery and distractor pool share identities".into(),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5E75);

    // Base sets.
    let mut base: Vec<(String, Vec<u64>, Vec<crate::synth::ElementDescriptor<f64>>)> =
        Vec::with_capacity(cfg.n_sets);
    for set_idx in 0..cfg.n_sets {
        let chosen = rand::seq::index::sample(&mut rng, gallery.len(), cfg.identities_per_set);
        let mut identities: Vec<u64> = chosen.iter().map(|i| gallery[i].id).collect();
        identities.sort_unstable();
        let mut elements = Vec::with_capacity(cfg.identities_per_set);
        for i in chosen.iter() {
            elements.push(sample_element_with(&gallery[i], cfg.noise_sigma, &mut rng)?);
        }
        base.push((format!("set_{set_idx:06}"), identities, elements));
    }

    // Queries: distinct identity tuples realized by the base sets, so every
    // query co-occurs in at least one set.
    let mut tuples: Vec<Vec<u64>> = base.iter().map(|(_, ids, _)| ids.clone()).collect();
    tuples.sort();
    tuples.dedup();
    if tuples.len() < cfg.n_queries {
        return Err(Error::InvalidArgument(format!(
            "only {} distinct co-occurring identity tuples, need {}",
            tuples.len(),
            cfg.n_queries
        )));
    }
    let mut query_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    query_rng.set_stream(0x0E17);
    let picked = rand::seq::index::sample(&mut query_rng, tuples.len(), cfg.n_queries);
    let queries: Vec<Vec<u64>> = picked.iter().map(|i| tuples[i].clone()).collect();

    // Judgments: relevance = number of query identities present in the set;
    // computed once from the base labels, identical across all datasets.
    let judgments = Judgments {
        queries: queries
            .iter()
            .map(|query| {
                let mut relevant = HashMap::new();
                for (id, identities, _) in &base {
                    let rel = query
                        .iter()
                        .filter(|q| identities.binary_search(q).is_ok())
                        .count() as u32;
                    if rel > 0 {
                        relevant.insert(id.clone(), rel);
                    }
                }
                QueryJudgments {
                    identities: query.clone(),
                    relevant,
                }
            })
            .collect(),
    };

    // Distractor variants; the base elements are shared, distractors are
    // appended per dataset with identity `None`.
    let mut datasets = Vec::with_capacity(cfg.distractor_counts.len());
    for &d in &cfg.distractor_counts {
        let mut distractor_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (d as u64) << 32);
        distractor_rng.set_stream(0xD157);
        let mut sets = Vec::with_capacity(base.len());
        for (id, _, elements) in &base {
            let mut all = elements.clone();
            for _ in 0..d {
                let proto = &distractor_pool[distractor_rng.random_range(0..distractor_pool.len())];
                let mut sample = sample_element_with(proto, cfg.noise_sigma, &mut distractor_rng)?;
                sample.identity = None;
                all.push(sample);
            }
            sets.push(SetRecord {
                id: id.clone(),
                elements: all,
            });
        }
        datasets.push(StressDataset { distractors: d, sets });
    }

    Ok(StressBench {
        datasets,
        queries,
        judgments,
    })
}

/// Draw `n_examples` fresh example descriptors per query identity; used once
/// per evaluation repeat.
pub fn sample_query_specs(
    gallery: &[IdentityPrototype<f64>],
    queries: &[Vec<u64>],
    n_examples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<QuerySpec>> {
    let by_id: HashMap<u64, &IdentityPrototype<f64>> =
        gallery.iter().map(|p| (p.id, p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x9E0A);
    queries
        .iter()
        .map(|query| {
            let identities = query
                .iter()
                .map(|id| {
                    let proto = by_id
                        .get(id)
                        .ok_or_else(|| Error::InvalidArgument(format!("identity {id} not in gallery")))?;
                    let examples = (0..n_examples)
                        .map(|_| {
                            sample_element_with(proto, noise_sigma, &mut rng).map(|e| e.vector)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(QueryIdentity { id: *id, examples })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QuerySpec { identities })
        })
        .collect()
}

/// Element descriptors sampled from a gallery, e.g. as a whitening fitting
/// population.
pub fn sample_gallery_elements(
    gallery: &[IdentityPrototype<f64>],
    per_identity: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5A3B);
    let mut out = Vec::with_capacity(gallery.len() * per_identity);
    for proto in gallery {
        for _ in 0..per_identity {
            out.push(sample_element_with(proto, noise_sigma, &mut rng)?.vector);
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------
// Gram-matrix orthogonality diagnostic
// ------------------------------------------------------------------

/// L2-normalized mean of one identity's sample descriptors.
pub fn identity_descriptor<F: Real>(samples: &[Vec<F>]) -> Result<Vec<F>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("identity without samples".into()));
    }
    let dim = samples[0].len();
    let mut mean = vec![F::zero(); dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += *x;
        }
    }
    let inv = F::one() / from_f64::<F>(samples.len() as f64);
    for m in mean.iter_mut() {
        *m *= inv;
    }
    normalize_in_place(&mut mean, "identity descriptor")?;
    Ok(mean)
}

/// Frobenius distance between the Gram matrix of the identity descriptors
/// and the identity matrix, after mean subtraction and re-normalization.
/// Smaller values mean more mutually orthogonal descriptors.
pub fn gram_diff<F: Real>(identity_descriptors: &[Vec<F>]) -> Result<F> {
    let m = identity_descriptors.len();
    if m < 2 {
        return Err(Error::InvalidArgument("gram diagnostic needs at least two identities".into()));
    }
    let dim = identity_descriptors[0].len();
    let mut mean = vec![F::zero(); dim];
    for d in identity_descriptors {
        if d.len() != dim {
            return Err(Error::InvalidArgument("ragged identity descriptors".into()));
        }
        for (acc, x) in mean.iter_mut().zip(d) {
            *acc += *x;
        }
    }
    let inv = F::one() / from_f64::<F>(m as f64);
    for acc in mean.iter_mut() {
        *acc *= inv;
    }
    let mut centered = Vec::with_capacity(m);
    for (i, d) in identity_descriptors.iter().enumerate() {
        let mut c: Vec<F> = d.iter().zip(&mean).map(|(x, mu)| *x - *mu).collect();
        normalize_in_place(&mut c, &format!("identity {i} after mean subtraction"))?;
        centered.push(c);
    }
    let mut gram = Mat::zeros(m, m);
    for i in 0..m {
        gram.set(i, i, F::one());
        for j in (i + 1)..m {
            let g = dot(&centered[i], &centered[j]);
            gram.set(i, j, g);
            gram.set(j, i, g);
        }
    }
    Ok(gram.frobenius_distance_to_identity())
}

/// Identity descriptors produced by a model: each identity gets
/// `samples_per_identity` synthetic samples, every sample is passed through
/// the aggregation pipeline as a singleton set, and the outputs are averaged
/// and re-normalized.
pub fn model_identity_descriptors(
    model: &Model,
    whitening: Option<&Whitening>,
    gallery: &[IdentityPrototype<f64>],
    samples_per_identity: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x96A4);
    let mut samples: Vec<Vec<Vec<f64>>> = Vec::with_capacity(gallery.len());
    for proto in gallery {
        let per_id = (0..samples_per_identity)
            .map(|_| sample_element_with(proto, noise_sigma, &mut rng).map(|e| e.vector))
            .collect::<Result<Vec<_>>>()?;
        samples.push(per_id);
    }
    samples
        .par_iter()
        .map(|per_id| {
            let descs = per_id
                .iter()
                .map(|x| pipeline_aggregate(std::slice::from_ref(x), model, whitening))
                .collect::<Result<Vec<_>>>()?;
            identity_descriptor(&descs)
        })
        .collect()
}

// ------------------------------------------------------------------
// Strategy evaluation
// ------------------------------------------------------------------

/// Scoring strategy selector for evaluation and timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    DescPerSet { query_agg: bool },
    DescPerElement { algo: MatchAlgo },
    Rerank { n_r: usize, query_agg: bool },
    PreTag,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::DescPerSet { query_agg: false } => "desc-per-set".into(),
            Strategy::DescPerSet { query_agg: true } => "desc-per-set+agg".into(),
            Strategy::DescPerElement { algo: MatchAlgo::Greedy } => "desc-per-element".into(),
            Strategy::DescPerElement { algo: MatchAlgo::Optimal } => {
                "desc-per-element-optimal".into()
            }
            Strategy::Rerank { n_r, query_agg: false } => format!("desc-per-set+rerank{n_r}"),
            Strategy::Rerank { n_r, query_agg: true } => format!("desc-per-set+agg+rerank{n_r}"),
            Strategy::PreTag => "pretag".into(),
        }
    }
}

/// Prebuilt indexes of one stress dataset.
pub struct BenchIndexes {
    pub distractors: usize,
    pub set_index: SetIndex,
    pub elem_index: ElementIndex,
}

pub fn build_bench_indexes(
    bench: &StressBench,
    model: &Model,
    whitening: Option<&Whitening>,
) -> Result<Vec<BenchIndexes>> {
    bench
        .datasets
        .iter()
        .map(|ds| {
            let (set_index, report) = build_set_index(&ds.sets, model, whitening)?;
            if !report.failed.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "{} sets failed to aggregate",
                    report.failed.len()
                )));
            }
            let elem_index = build_element_index(&ds.sets, model.elem_dim, whitening)?;
            Ok(BenchIndexes {
                distractors: ds.distractors,
                set_index,
                elem_index,
            })
        })
        .collect()
}

/// Rank one query with one strategy, returning the top `k` entries.
pub fn rank_query(
    strategy: Strategy,
    indexes: &BenchIndexes,
    model: &Model,
    whitening: Option<&Whitening>,
    spec: &QuerySpec,
    tags: Option<&TagIndex>,
    k: usize,
) -> Result<RankedResult> {
    let head = &model.head;
    match strategy {
        Strategy::DescPerSet { query_agg } => {
            let qdescs = if query_agg {
                vec![aggregate_query(spec, model, whitening)?]
            } else {
                make_query_descriptors(spec, model, whitening, true)?
            };
            Ok(score_desc_per_set_topk(&indexes.set_index, &qdescs, head, k))
        }
        Strategy::DescPerElement { algo } => {
            let qdescs = query_element_descriptors(spec, whitening)?;
            Ok(score_desc_per_element_topk(&indexes.elem_index, &qdescs, head, k, algo))
        }
        Strategy::Rerank { n_r, query_agg } => {
            let qdescs = if query_agg {
                vec![aggregate_query(spec, model, whitening)?]
            } else {
                make_query_descriptors(spec, model, whitening, true)?
            };
            let initial =
                score_desc_per_set_topk(&indexes.set_index, &qdescs, head, n_r.max(k));
            let qdescs_elem = query_element_descriptors(spec, whitening)?;
            let mut reranked = rerank(&initial, n_r, &indexes.elem_index, &qdescs_elem, head)?;
            reranked.entries.truncate(k);
            Ok(reranked)
        }
        Strategy::PreTag => {
            let tags = tags.ok_or_else(|| {
                Error::InvalidArgument("pre-tag strategy needs a tag index".into())
            })?;
            let ids: Vec<u64> = spec.identities.iter().map(|q| q.id).collect();
            let mut ranked = score_pretag(tags, &ids)?;
            ranked.entries.truncate(k);
            Ok(ranked)
        }
    }
}

/// Mean nDCG of one strategy on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct MethodScore {
    pub method: String,
    pub distractors: usize,
    pub ndcg10: f64,
    pub ndcg30: f64,
}

/// Evaluate a strategy over all datasets: `repeats` rounds of fresh query
/// examples, nDCG@10/@30 averaged over queries and repeats. Queries are
/// evaluated in parallel; results do not depend on the thread count.
pub fn evaluate_strategy(
    strategy: Strategy,
    indexes: &[BenchIndexes],
    bench: &StressBench,
    gallery: &[IdentityPrototype<f64>],
    model: &Model,
    whitening: Option<&Whitening>,
    tags: Option<&TagIndex>,
    n_examples: usize,
    repeats: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<MethodScore>> {
    let mut out = Vec::with_capacity(indexes.len());
    for per_d in indexes {
        let mut sums = (0.0f64, 0.0f64);
        let mut count = 0usize;
        for repeat in 0..repeats {
            let specs = sample_query_specs(
                gallery,
                &bench.queries,
                n_examples,
                noise_sigma,
                seed ^ ((repeat as u64 + 1) << 24),
            )?;
            let per_query: Vec<(f64, f64)> = specs
                .par_iter()
                .zip(&bench.judgments.queries)
                .map(|(spec, judgments)| {
                    let ranked =
                        rank_query(strategy, per_d, model, whitening, spec, tags, 30)?;
                    Ok((
                        ndcg_at_n(&ranked, judgments, 10),
                        ndcg_at_n(&ranked, judgments, 30),
                    ))
                })
                .collect::<Result<_>>()?;
            for (n10, n30) in per_query {
                sums.0 += n10;
                sums.1 += n30;
                count += 1;
            }
        }
        out.push(MethodScore {
            method: strategy.label(),
            distractors: per_d.distractors,
            ndcg10: sums.0 / count as f64,
            ndcg30: sums.1 / count as f64,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------------
// Timing
// ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub strategy: String,
    pub mean_seconds: f64,
    pub speedup_vs_element: f64,
}

/// Wall-clock timing of scoring strategies over a fixed query workload,
/// single-threaded, one warm-up pass excluded from measurement. Speedups are
/// relative to greedy descriptor-per-element, which is always measured.
pub fn time_strategies(
    indexes: &BenchIndexes,
    model: &Model,
    whitening: Option<&Whitening>,
    specs: &[QuerySpec],
    strategies: &[Strategy],
    tags: Option<&TagIndex>,
    repeats: usize,
    topk: usize,
) -> Result<Vec<TimingRow>> {
    if specs.is_empty() || repeats == 0 {
        return Err(Error::InvalidArgument("empty timing workload".into()));
    }
    let mut ordered: Vec<Strategy> = vec![Strategy::DescPerElement { algo: MatchAlgo::Greedy }];
    for s in strategies {
        if !ordered.contains(s) {
            ordered.push(*s);
        }
    }

    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    for strategy in &ordered {
        // Warm-up pass: touches every code path and page, not measured.
        for spec in specs {
            rank_query(*strategy, indexes, model, whitening, spec, tags, topk)?;
        }
        let start = Instant::now();
        for _ in 0..repeats {
            for spec in specs {
                rank_query(*strategy, indexes, model, whitening, spec, tags, topk)?;
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        means.insert(strategy.label(), elapsed / (repeats * specs.len()) as f64);
    }

    let element_mean = means[&Strategy::DescPerElement { algo: MatchAlgo::Greedy }.label()];
    Ok(ordered
        .iter()
        .map(|s| {
            let mean = means[&s.label()];
            TimingRow {
                strategy: s.label(),
                mean_seconds: mean,
                speedup_vs_element: element_mean / mean,
            }
        })
        .collect())
}

/// One output row of the evaluation harness.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub distractors: usize,
    pub ndcg10: f64,
    pub ndcg30: f64,
    pub seconds: Option<f64>,
    pub speedup: Option<f64>,
}

/// CSV with columns `method,d,ndcg10,ndcg30,seconds,speedup`.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut w: W) -> Result<()> {
    writeln!(w, "method,d,ndcg10,ndcg30,seconds,speedup")?;
    for row in rows {
        let seconds = row.seconds.map(|s| format!("{s:.6}")).unwrap_or_default();
        let speedup = row.speedup.map(|s| format!("{s:.2}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{:.3},{:.3},{},{}",
            row.method, row.distractors, row.ndcg10, row.ndcg30, seconds, speedup
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_gallery_with_ids;

    #[test]
    fn dcg_known_values() {
        // [2, 1, 0]: 3/1 + 1/log2(3) + 0 = 3.630929...
        let dcg = dcg_at_n(&[2, 1, 0], 3);
        assert!((dcg - 3.6309297535714573).abs() < 1e-12);
        // [1, 2]: 1 + 3/log2(3) = 2.892789...
        let dcg = dcg_at_n(&[1, 2], 2);
        assert!((dcg - 2.8927892607143724).abs() < 1e-12);
    }

    #[test]
    fn dcg_all_zero_is_zero() {
        assert_eq!(dcg_at_n(&[0, 0, 0], 3), 0.0);
        assert_eq!(dcg_at_n(&[], 5), 0.0);
    }

    #[test]
    fn ndcg_perfect_ranking_is_100() {
        let judgments = QueryJudgments {
            identities: vec![1, 2],
            relevant: [("a".to_string(), 2u32), ("b".to_string(), 1u32)]
                .into_iter()
                .collect(),
        };
        let ranking = RankedResult {
            entries: vec![("a".into(), 1.9), ("b".into(), 0.9), ("c".into(), 0.1)],
        };
        assert!((ndcg_at_n(&ranking, &judgments, 3) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_swapped_pair_value() {
        // Ranking [rel 1, rel 2] against ideal [2, 1]: 100 * 2.89279 / 3.63093 = 79.67.
        let judgments = QueryJudgments {
            identities: vec![1, 2],
            relevant: [("a".to_string(), 2u32), ("b".to_string(), 1u32)]
                .into_iter()
                .collect(),
        };
        let ranking = RankedResult {
            entries: vec![("b".into(), 0.9), ("a".into(), 0.8)],
        };
        let got = ndcg_at_n(&ranking, &judgments, 2);
        let expected = 100.0 * 2.8927892607143724 / 3.6309297535714573;
        assert!((got - expected).abs() < 1e-10);
        assert!((got - 79.67).abs() < 0.005);
    }

    #[test]
    fn ndcg_ignores_items_below_cutoff() {
        let judgments = QueryJudgments {
            identities: vec![1],
            relevant: [("a".to_string(), 1u32)].into_iter().collect(),
        };
        let short = RankedResult {
            entries: vec![("a".into(), 0.9)],
        };
        let long = RankedResult {
            entries: vec![("a".into(), 0.9), ("x".into(), 0.1), ("y".into(), 0.05)],
        };
        assert_eq!(ndcg_at_n(&short, &judgments, 1), ndcg_at_n(&long, &judgments, 1));
    }

    #[test]
    fn vacuous_query_scores_100() {
        let judgments = QueryJudgments::default();
        let ranking = RankedResult { entries: vec![("a".into(), 0.4)] };
        assert_eq!(ndcg_at_n(&ranking, &judgments, 10), 100.0);
    }

    fn small_bench() -> (Vec<IdentityPrototype<f64>>, Vec<IdentityPrototype<f64>>, StressBench) {
        let gallery = gen_gallery_with_ids(30, 16, 3, 0).unwrap();
        let pool = gen_gallery_with_ids(10, 16, 4, 1_000_000).unwrap();
        let cfg = StressConfig {
            n_sets: 200,
            n_queries: 20,
            repeats: 2,
            seed: 9,
            ..StressConfig::default()
        };
        let bench = synth_stress_datasets(&gallery, &pool, &cfg).unwrap();
        (gallery, pool, bench)
    }

    #[test]
    fn stress_base_sets_have_exactly_two_elements() {
        let (_, _, bench) = small_bench();
        let base = &bench.datasets[0];
        assert_eq!(base.distractors, 0);
        for set in &base.sets {
            assert_eq!(set.elements.len(), 2);
            assert!(set.elements.iter().all(|e| e.identity.is_some()));
        }
        let d3 = bench.datasets.iter().find(|d| d.distractors == 3).unwrap();
        for set in &d3.sets {
            assert_eq!(set.elements.len(), 5);
            assert_eq!(set.elements.iter().filter(|e| e.identity.is_none()).count(), 3);
        }
    }

    #[test]
    fn judgments_identical_across_distractor_counts() {
        // Judgments are computed once from the base labels; serialize to
        // bytes and compare against a recomputation from the d=3 labels.
        let (_, _, bench) = small_bench();
        let d3 = bench.datasets.iter().find(|d| d.distractors == 3).unwrap();
        for (qi, query) in bench.queries.iter().enumerate() {
            for set in &d3.sets {
                let rel = set
                    .elements
                    .iter()
                    .filter_map(|e| e.identity)
                    .filter(|id| query.contains(id))
                    .count() as u32;
                assert_eq!(rel, bench.judgments.queries[qi].relevance(&set.id));
            }
        }
    }

    #[test]
    fn every_query_has_a_fully_relevant_set() {
        let (_, _, bench) = small_bench();
        for q in &bench.judgments.queries {
            assert!(q.ideal_dcg(10) > 0.0);
            assert!(q.relevant.values().any(|rel| *rel == 2));
        }
    }

    #[test]
    fn judgments_jsonl_round_trip() {
        let (_, _, bench) = small_bench();
        let mut buf = Vec::new();
        bench.judgments.write_jsonl(&mut buf).unwrap();
        let back = Judgments::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.queries.len(), bench.judgments.queries.len());
        for (a, b) in back.queries.iter().zip(&bench.judgments.queries) {
            assert_eq!(a.identities, b.identities);
            assert_eq!(a.relevant, b.relevant);
        }
    }

    #[test]
    fn identity_gram_scores_zero() {
        // An orthonormal processed family has G = I, which scores 0; checked
        // at the Gram level since mean subtraction of a finite family can
        // never leave it exactly orthogonal.
        assert_eq!(Mat::<f64>::identity(5).frobenius_distance_to_identity(), 0.0);
        // High-dimensional near-orthogonal descriptors land near the
        // mean-subtraction floor sqrt(m/(m-1)): centering a finite family
        // introduces -1/(m-1) correlations even for orthogonal inputs.
        let m = 6;
        let gallery = gen_gallery_with_ids(m, 512, 5, 0).unwrap();
        let descs: Vec<Vec<f64>> = gallery.into_iter().map(|p| p.center).collect();
        let g = gram_diff(&descs).unwrap();
        let floor = (m as f64 / (m as f64 - 1.0)).sqrt();
        assert!((g - floor).abs() < 0.2, "gram diff {g}, floor {floor}");
    }

    #[test]
    fn gram_diff_antiparallel_pair_is_sqrt2() {
        let d = vec![0.6, 0.8];
        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let g = gram_diff(&[d, neg].to_vec()).unwrap();
        assert!((g - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn gram_diff_invariant_to_order() {
        let descs: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.8, 0.0],
            vec![0.1, 0.2, 0.9],
        ];
        let a = gram_diff(&descs).unwrap();
        let mut reversed = descs.clone();
        reversed.reverse();
        let b = gram_diff(&reversed).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gram_diff_rejects_identical_descriptors() {
        let descs = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let err = gram_diff(&descs).unwrap_err();
        assert!(err.to_string().contains("identity 0"), "{err}");
    }

    #[test]
    fn evaluate_strategy_runs_end_to_end() {
        let (gallery, _, bench) = small_bench();
        let model = AggregatorModel::average_baseline(16);
        let indexes = build_bench_indexes(&bench, &model, None).unwrap();
        let scores = evaluate_strategy(
            Strategy::DescPerSet { query_agg: false },
            &indexes,
            &bench,
            &gallery,
            &model,
            None,
            None,
            1,
            2,
            0.25,
            77,
        )
        .unwrap();
        assert_eq!(scores.len(), bench.datasets.len());
        for s in &scores {
            assert!(s.ndcg10 >= 0.0 && s.ndcg10 <= 100.0);
            assert!(s.ndcg30 >= 0.0 && s.ndcg30 <= 100.0);
        }
        // With 2-identity noiseless-ish queries on tiny sets, the base
        // dataset should rank far above chance.
        assert!(scores[0].ndcg10 > 50.0, "base nDCG@10 = {}", scores[0].ndcg10);
    }

    #[test]
    fn timing_reports_all_strategies() {
        let (gallery, _, bench) = small_bench();
        let model = AggregatorModel::average_baseline(16);
        let indexes = build_bench_indexes(&bench, &model, None).unwrap();
        let specs = sample_query_specs(&gallery, &bench.queries[..5].to_vec(), 1, 0.25, 5).unwrap();
        let rows = time_strategies(
            &indexes[0],
            &model,
            None,
            &specs,
            &[
                Strategy::DescPerSet { query_agg: false },
                Strategy::Rerank { n_r: 20, query_agg: false },
            ],
            None,
            2,
            10,
        )
        .unwrap();
        assert_eq!(rows.len(), 3);
        assert!((rows[0].speedup_vs_element - 1.0).abs() < 1e-9);
        for row in &rows {
            assert!(row.mean_seconds > 0.0);
        }
    }
}
