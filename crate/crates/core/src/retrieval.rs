//! Index construction and scoring strategies.
//!
//! Two index layouts trade speed against fidelity: a [`SetIndex`] stores one
//! aggregated `f32` vector per set (scored with scalar products against query
//! descriptors), an [`ElementIndex`] keeps every element descriptor (scored
//! with greedy bipartite matching between query identities and elements).
//! [`rerank`] combines them: a fast set-level pass ranks everything, the top
//! slice is rescored per element. [`TagIndex`] is the closed-world
//! pre-tagging baseline backed by an inverted index.
//!
//! Indexes are immutable after construction and can be shared across
//! threads. Scores are always computed in `f64`; stored vectors are `f32`,
//! matching the on-disk layout bit for bit. Every ranking breaks score ties
//! by ascending set id, so results are total and reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate_set, logistic, AggregatorModel, LogisticHead};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::synth::ElementDescriptor;
use crate::whitening::{apply_whitening, StagedWhitening, WhitenStage};

pub const SET_INDEX_MAGIC: [u8; 4] = *b"SETN";
pub const ELEMENT_INDEX_MAGIC: [u8; 4] = *b"SETE";
pub const INDEX_FORMAT_VERSION: u32 = 1;

type Model = AggregatorModel<f64>;
type Whitening = StagedWhitening<f64>;
type Head = LogisticHead<f64>;

// ------------------------------------------------------------------
// Datasets
// ------------------------------------------------------------------

/// One record of the collection: a set of element descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SetRecord {
    pub id: String,
    pub elements: Vec<ElementDescriptor<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ElementRecord {
    vector: Vec<f64>,
    identity: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SetRecordFile {
    id: String,
    elements: Vec<ElementRecord>,
}

/// Write a dataset as JSON-lines, one set per line.
pub fn write_dataset_jsonl<W: Write>(dataset: &[SetRecord], mut w: W) -> Result<()> {
    for set in dataset {
        let rec = SetRecordFile {
            id: set.id.clone(),
            elements: set
                .elements
                .iter()
                .map(|e| ElementRecord {
                    vector: e.vector.clone(),
                    identity: e.identity,
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset_jsonl<R: std::io::BufRead>(r: R) -> Result<Vec<SetRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SetRecordFile = serde_json::from_str(&line)?;
        out.push(SetRecord {
            id: rec.id,
            elements: rec
                .elements
                .into_iter()
                .map(|e| ElementDescriptor {
                    vector: e.vector,
                    identity: e.identity,
                })
                .collect(),
        });
    }
    Ok(out)
}

// ------------------------------------------------------------------
// Whitening-aware aggregation
// ------------------------------------------------------------------

fn whiten_elements(
    elements: &[Vec<f64>],
    whitening: Option<&Whitening>,
) -> Result<Option<Vec<Vec<f64>>>> {
    match whitening {
        Some(w) if w.stage == WhitenStage::BeforeAggregation => {
            let whitened = elements
                .iter()
                .map(|e| apply_whitening(e, &w.transform, true))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(whitened))
        }
        _ => Ok(None),
    }
}

/// Aggregate a set through the model with whitening applied at its
/// configured stage (elements before pooling, or the set descriptor after).
pub fn pipeline_aggregate(
    elements: &[Vec<f64>],
    model: &Model,
    whitening: Option<&Whitening>,
) -> Result<Vec<f64>> {
    let whitened = whiten_elements(elements, whitening)?;
    let source = whitened.as_deref().unwrap_or(elements);
    let refs: Vec<&[f64]> = source.iter().map(|v| v.as_slice()).collect();
    let mut out = aggregate_set(&refs, model)?;
    if let Some(w) = whitening {
        if w.stage == WhitenStage::AfterAggregation {
            out = apply_whitening(&out, &w.transform, true)?;
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------
// Set index
// ------------------------------------------------------------------

/// Dense matrix of per-set descriptors (`f32` rows, unit norm).
#[derive(Debug, Clone, PartialEq)]
pub struct SetIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
}

impl SetIndex {
    pub fn from_rows(dim: usize, ids: Vec<String>, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != ids.len() * dim {
            return Err(Error::InvalidArgument("set index row/ids mismatch".into()));
        }
        Ok(SetIndex { dim, ids, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&SET_INDEX_MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in &self.rows {
            w.write_all(&v.to_le_bytes())?;
        }
        write_id_table(&self.ids, &mut w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        check_header(&mut r, SET_INDEX_MAGIC, "set index")?;
        let dim = read_u32(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut rows = vec![0f32; n * dim];
        for v in rows.iter_mut() {
            *v = read_f32(&mut r)?;
        }
        let ids = read_id_table(&mut r, n)?;
        SetIndex::from_rows(dim, ids, rows)
    }

    /// Exact serialized size in bytes.
    pub fn serialized_len(&self) -> usize {
        4 + 4 + 4 + 8
            + self.rows.len() * 4
            + self.ids.iter().map(|id| 4 + id.len()).sum::<usize>()
    }
}

/// Per-set outcome bookkeeping from an index build.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub skipped_empty: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Aggregate every set of `dataset` into one index row. Empty sets are
/// skipped with a warning; per-set aggregation failures are recorded and the
/// build only fails when no set survives.
pub fn build_set_index(
    dataset: &[SetRecord],
    model: &Model,
    whitening: Option<&Whitening>,
) -> Result<(SetIndex, BuildReport)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let dim = model.set_dim;
    let aggregated: Vec<(usize, std::result::Result<Vec<f64>, String>)> = dataset
        .par_iter()
        .enumerate()
        .filter(|(_, set)| !set.elements.is_empty())
        .map(|(i, set)| {
            let elements: Vec<Vec<f64>> =
                set.elements.iter().map(|e| e.vector.clone()).collect();
            let out = pipeline_aggregate(&elements, model, whitening)
                .map_err(|e| e.to_string());
            (i, out)
        })
        .collect();

    let mut report = BuildReport::default();
    for set in dataset.iter().filter(|s| s.elements.is_empty()) {
        log::warn!("skipping empty set {:?}", set.id);
        report.skipped_empty.push(set.id.clone());
    }
    let mut ids = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    for (i, outcome) in aggregated {
        match outcome {
            Ok(v) => {
                ids.push(dataset[i].id.clone());
                rows.extend(v.iter().map(|x| *x as f32));
            }
            Err(msg) => report.failed.push((dataset[i].id.clone(), msg)),
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "all {} sets failed to aggregate",
            dataset.len()
        )));
    }
    Ok((SetIndex { dim, ids, rows }, report))
}

// ------------------------------------------------------------------
// Element index
// ------------------------------------------------------------------

/// Per-set element descriptors, each set's elements stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementIndex {
    elem_dim: usize,
    ids: Vec<String>,
    sets: Vec<Vec<f32>>,
    id_lookup: HashMap<String, usize>,
}

impl ElementIndex {
    pub fn from_sets(elem_dim: usize, ids: Vec<String>, sets: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != sets.len() {
            return Err(Error::InvalidArgument("element index id/set mismatch".into()));
        }
        for (id, set) in ids.iter().zip(&sets) {
            if set.is_empty() || set.len() % elem_dim != 0 {
                return Err(Error::InvalidArgument(format!(
                    "set {id:?} holds a broken element block"
                )));
            }
        }
        let id_lookup = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(ElementIndex { elem_dim, ids, sets, id_lookup })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn elem_dim(&self) -> usize {
        self.elem_dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Flat `count x elem_dim` element block of one set.
    #[inline]
    pub fn elements(&self, i: usize) -> &[f32] {
        &self.sets[i]
    }

    pub fn element_count(&self, i: usize) -> usize {
        self.sets[i].len() / self.elem_dim
    }

    pub fn row_of_id(&self, id: &str) -> Option<usize> {
        self.id_lookup.get(id).copied()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&ELEMENT_INDEX_MAGIC)?;
        w.write_all(&INDEX_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.elem_dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for set in &self.sets {
            let count = (set.len() / self.elem_dim) as u32;
            w.write_all(&count.to_le_bytes())?;
            for v in set {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        write_id_table(&self.ids, &mut w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        check_header(&mut r, ELEMENT_INDEX_MAGIC, "element index")?;
        let elem_dim = read_u32(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut sets = Vec::with_capacity(n);
        for _ in 0..n {
            let count = read_u32(&mut r)? as usize;
            let mut block = vec![0f32; count * elem_dim];
            for v in block.iter_mut() {
                *v = read_f32(&mut r)?;
            }
            sets.push(block);
        }
        let ids = read_id_table(&mut r, n)?;
        ElementIndex::from_sets(elem_dim, ids, sets)
    }
}

/// Store every element descriptor (whitened when a before-aggregation
/// transform is configured), skipping empty sets.
pub fn build_element_index(
    dataset: &[SetRecord],
    elem_dim: usize,
    whitening: Option<&Whitening>,
) -> Result<ElementIndex> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut ids = Vec::new();
    let mut sets = Vec::new();
    for set in dataset {
        if set.elements.is_empty() {
            log::warn!("skipping empty set {:?}", set.id);
            continue;
        }
        let mut block = Vec::with_capacity(set.elements.len() * elem_dim);
        for e in &set.elements {
            if e.vector.len() != elem_dim {
                return Err(Error::InvalidArgument(format!(
                    "set {:?} has an element of dimension {}, expected {elem_dim}",
                    set.id,
                    e.vector.len()
                )));
            }
            let stored = match whitening {
                Some(w) if w.stage == WhitenStage::BeforeAggregation => {
                    apply_whitening(&e.vector, &w.transform, true)?
                }
                _ => e.vector.clone(),
            };
            block.extend(stored.iter().map(|x| *x as f32));
        }
        ids.push(set.id.clone());
        sets.push(block);
    }
    ElementIndex::from_sets(elem_dim, ids, sets)
}

// ------------------------------------------------------------------
// Binary helpers
// ------------------------------------------------------------------

fn check_header<R: Read>(r: &mut R, magic: [u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got)?;
    if got != magic {
        return Err(Error::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(r)?;
    if version != INDEX_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported format version {version} (this reader supports {INDEX_FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(f32::from_le_bytes(buf))
}

fn write_id_table<W: Write>(ids: &[String], w: &mut W) -> Result<()> {
    for id in ids {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    Ok(())
}

fn read_id_table<R: Read>(r: &mut R, n: usize) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        ids.push(String::from_utf8(buf).map_err(|_| Error::Format("id table is not UTF-8".into()))?);
    }
    Ok(ids)
}

// ------------------------------------------------------------------
// Queries
// ------------------------------------------------------------------

/// One query identity with its available example descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryIdentity {
    pub id: u64,
    pub examples: Vec<Vec<f64>>,
}

/// A multi-identity query.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub identities: Vec<QueryIdentity>,
}

impl QuerySpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities.is_empty() {
            return Err(Error::InvalidArgument("query needs at least one identity".into()));
        }
        if self.identities.iter().any(|q| q.examples.is_empty()) {
            return Err(Error::InvalidArgument(
                "every query identity needs at least one example".into(),
            ));
        }
        Ok(())
    }
}

/// One set-space descriptor per query identity. With several examples per
/// identity and `aggregate_examples` set, the examples are pooled through
/// the model into a richer descriptor; otherwise the first example is used
/// (as a singleton-set aggregation).
pub fn make_query_descriptors(
    query: &QuerySpec,
    model: &Model,
    whitening: Option<&Whitening>,
    aggregate_examples: bool,
) -> Result<Vec<Vec<f64>>> {
    query.validate()?;
    query
        .identities
        .iter()
        .map(|identity| {
            if identity.examples.len() > 1 && aggregate_examples {
                pipeline_aggregate(&identity.examples, model, whitening)
            } else {
                pipeline_aggregate(&identity.examples[..1], model, whitening)
            }
        })
        .collect()
}

/// Collapse the whole query (all identities, all examples) into one
/// set-space descriptor, so a multi-identity query costs a single scan.
pub fn aggregate_query(
    query: &QuerySpec,
    model: &Model,
    whitening: Option<&Whitening>,
) -> Result<Vec<f64>> {
    query.validate()?;
    let all: Vec<Vec<f64>> = query
        .identities
        .iter()
        .flat_map(|q| q.examples.iter().cloned())
        .collect();
    pipeline_aggregate(&all, model, whitening)
}

/// Element-space descriptor per query identity for per-element scoring:
/// the (before-whitened) examples averaged and re-normalized.
pub fn query_element_descriptors(
    query: &QuerySpec,
    whitening: Option<&Whitening>,
) -> Result<Vec<Vec<f64>>> {
    query.validate()?;
    query
        .identities
        .iter()
        .map(|identity| {
            let examples = whiten_elements(&identity.examples, whitening)?
                .unwrap_or_else(|| identity.examples.clone());
            let dim = examples[0].len();
            let mut mean = vec![0f64; dim];
            for e in &examples {
                for (m, x) in mean.iter_mut().zip(e) {
                    *m += *x;
                }
            }
            crate::linalg::normalize_in_place(&mut mean, "query descriptor")?;
            Ok(mean)
        })
        .collect()
}

// ------------------------------------------------------------------
// Rankings
// ------------------------------------------------------------------

/// A scored ranking: scores non-increasing, ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub entries: Vec<(String, f64)>,
}

impl RankedResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, k: usize) -> &[(String, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }
}

fn ranking_cmp(ids: &[String], scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    scores[b]
        .total_cmp(&scores[a])
        .then_with(|| ids[a].cmp(&ids[b]))
}

fn rank_full(ids: &[String], scores: &[f64]) -> RankedResult {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| ranking_cmp(ids, scores, a, b));
    RankedResult {
        entries: order
            .into_iter()
            .map(|i| (ids[i].clone(), scores[i]))
            .collect(),
    }
}

/// Bounded selection: same result as the head of [`rank_full`] without
/// sorting the whole collection.
fn rank_topk(ids: &[String], scores: &[f64], k: usize) -> RankedResult {
    let k = k.min(scores.len());
    if k == 0 {
        return RankedResult { entries: Vec::new() };
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| ranking_cmp(ids, scores, a, b));
        order.truncate(k);
    }
    order.sort_unstable_by(|&a, &b| ranking_cmp(ids, scores, a, b));
    RankedResult {
        entries: order
            .into_iter()
            .map(|i| (ids[i].clone(), scores[i]))
            .collect(),
    }
}

// ------------------------------------------------------------------
// Descriptor-per-set scoring
// ------------------------------------------------------------------

/// Per-row scores: `sum_q sigma(w <q, row> + b)`.
pub fn desc_per_set_scores(index: &SetIndex, qdescs: &[Vec<f64>], head: &Head) -> Vec<f64> {
    let dim = index.dim();
    debug_assert!(qdescs.iter().all(|q| q.len() == dim));
    let mut scores = vec![0f64; index.len()];
    for (r, score) in scores.iter_mut().enumerate() {
        let row = index.row(r);
        let mut total = 0.0;
        for q in qdescs {
            let mut acc = 0.0f64;
            for (x, y) in q.iter().zip(row) {
                acc += x * (*y as f64);
            }
            total += logistic(head.weight * acc + head.bias);
        }
        *score = total;
    }
    scores
}

/// Full descriptor-per-set ranking over the index.
pub fn score_desc_per_set(index: &SetIndex, qdescs: &[Vec<f64>], head: &Head) -> RankedResult {
    let scores = desc_per_set_scores(index, qdescs, head);
    rank_full(index.ids(), &scores)
}

/// Head of the descriptor-per-set ranking via bounded selection.
pub fn score_desc_per_set_topk(
    index: &SetIndex,
    qdescs: &[Vec<f64>],
    head: &Head,
    k: usize,
) -> RankedResult {
    let scores = desc_per_set_scores(index, qdescs, head);
    rank_topk(index.ids(), &scores, k)
}

// ------------------------------------------------------------------
// Assignment scoring (descriptor-per-element)
// ------------------------------------------------------------------

/// All query-element logistic scores for one set as a `Q x F` matrix.
pub fn pair_scores(
    elements: &[f32],
    elem_dim: usize,
    qdescs: &[Vec<f64>],
    head: &Head,
) -> Mat<f64> {
    let f_count = elements.len() / elem_dim;
    let mut scores = Mat::zeros(qdescs.len(), f_count);
    for (qi, q) in qdescs.iter().enumerate() {
        let row = scores.row_mut(qi);
        for (fi, element) in elements.chunks_exact(elem_dim).enumerate() {
            let mut acc = 0.0f64;
            for (x, y) in q.iter().zip(element) {
                acc += x * (*y as f64);
            }
            row[fi] = logistic(head.weight * acc + head.bias);
        }
    }
    scores
}

/// Greedy matching total: all pairs sorted by decreasing score, accepted
/// while both sides are unused. Each query matches at most one element and
/// vice versa. `O(QF log(QF))` per set.
pub fn greedy_total(scores: &Mat<f64>) -> f64 {
    let (q_count, f_count) = (scores.rows(), scores.cols());
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(q_count * f_count);
    for q in 0..q_count {
        let row = scores.row(q);
        for f in 0..f_count {
            pairs.push((row[f], q as u32, f as u32));
        }
    }
    pairs.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut total = 0.0;
    let mut remaining = q_count.min(f_count);
    if q_count <= 64 && f_count <= 64 {
        let (mut q_used, mut f_used) = (0u64, 0u64);
        for (score, q, f) in pairs {
            if q_used & (1 << q) == 0 && f_used & (1 << f) == 0 {
                q_used |= 1 << q;
                f_used |= 1 << f;
                total += score;
                remaining -= 1;
                if remaining == 0 {
                    break;
                }
            }
        }
    } else {
        let mut q_used = vec![false; q_count];
        let mut f_used = vec![false; f_count];
        for (score, q, f) in pairs {
            if !q_used[q as usize] && !f_used[f as usize] {
                q_used[q as usize] = true;
                f_used[f as usize] = true;
                total += score;
                remaining -= 1;
                if remaining == 0 {
                    break;
                }
            }
        }
    }
    total
}

/// Exact maximum-weight assignment total over the same pair scores:
/// exhaustive enumeration when the small side has at most 6 entries, the
/// Hungarian (augmenting-path) method above that.
pub fn optimal_total(scores: &Mat<f64>) -> f64 {
    let transpose_needed = scores.rows() > scores.cols();
    let (rows, cols) = if transpose_needed {
        (scores.cols(), scores.rows())
    } else {
        (scores.rows(), scores.cols())
    };
    let at = |r: usize, c: usize| -> f64 {
        if transpose_needed {
            scores.get(c, r)
        } else {
            scores.get(r, c)
        }
    };
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows <= 6 {
        fn recurse(
            row: usize,
            rows: usize,
            cols: usize,
            used: u128,
            at: &dyn Fn(usize, usize) -> f64,
        ) -> f64 {
            if row == rows {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for c in 0..cols {
                if used & (1 << c) == 0 {
                    let v = at(row, c) + recurse(row + 1, rows, cols, used | (1 << c), at);
                    if v > best {
                        best = v;
                    }
                }
            }
            best
        }
        debug_assert!(cols <= 128, "exhaustive search supports up to 128 columns");
        recurse(0, rows, cols, 0, &at)
    } else {
        hungarian_max(rows, cols, &at)
    }
}

/// Max-weight rectangular assignment via the Jonker-Volgenant style
/// augmenting-path algorithm on negated scores; `rows <= cols`.
fn hungarian_max(rows: usize, cols: usize, at: &dyn Fn(usize, usize) -> f64) -> f64 {
    let cost = |r: usize, c: usize| -at(r, c);
    // job[c] = row assigned to column c; column `cols` is a virtual root.
    let mut job: Vec<Option<usize>> = vec![None; cols + 1];
    let mut row_pot = vec![0.0f64; rows];
    let mut col_pot = vec![0.0f64; cols + 1];

    for new_row in 0..rows {
        let mut cur_col = cols;
        job[cur_col] = Some(new_row);
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut prev: Vec<Option<usize>> = vec![None; cols + 1];
        let mut in_tree = vec![false; cols + 1];

        while let Some(row) = job[cur_col] {
            in_tree[cur_col] = true;
            let mut delta = f64::INFINITY;
            let mut next_col = 0;
            for c in 0..cols {
                if !in_tree[c] {
                    let reduced = cost(row, c) - row_pot[row] - col_pot[c];
                    if reduced < min_to[c] {
                        min_to[c] = reduced;
                        prev[c] = Some(cur_col);
                    }
                    if min_to[c] < delta {
                        delta = min_to[c];
                        next_col = c;
                    }
                }
            }
            for c in 0..=cols {
                if in_tree[c] {
                    if let Some(r) = job[c] {
                        row_pot[r] += delta;
                    }
                    col_pot[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            cur_col = next_col;
        }

        while cur_col != cols {
            let prev_col = prev[cur_col].expect("augmenting path is connected");
            job[cur_col] = job[prev_col];
            cur_col = prev_col;
        }
    }

    let mut total = 0.0;
    for c in 0..cols {
        if let Some(r) = job[c] {
            total += at(r, c);
        }
    }
    total
}

/// Greedy-matching score of one set against the query identities.
pub fn score_set_greedy(
    elements: &[f32],
    elem_dim: usize,
    qdescs: &[Vec<f64>],
    head: &Head,
) -> f64 {
    greedy_total(&pair_scores(elements, elem_dim, qdescs, head))
}

/// Optimal-assignment score of one set (test oracle and accuracy reference).
pub fn score_set_optimal(
    elements: &[f32],
    elem_dim: usize,
    qdescs: &[Vec<f64>],
    head: &Head,
) -> f64 {
    optimal_total(&pair_scores(elements, elem_dim, qdescs, head))
}

/// Matching algorithm for per-element scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchAlgo {
    Greedy,
    Optimal,
}

pub fn desc_per_element_scores(
    index: &ElementIndex,
    qdescs: &[Vec<f64>],
    head: &Head,
    algo: MatchAlgo,
) -> Vec<f64> {
    let dim = index.elem_dim();
    (0..index.len())
        .map(|i| match algo {
            MatchAlgo::Greedy => score_set_greedy(index.elements(i), dim, qdescs, head),
            MatchAlgo::Optimal => score_set_optimal(index.elements(i), dim, qdescs, head),
        })
        .collect()
}

/// Full descriptor-per-element ranking (greedy matching).
pub fn score_desc_per_element(
    index: &ElementIndex,
    qdescs: &[Vec<f64>],
    head: &Head,
) -> RankedResult {
    let scores = desc_per_element_scores(index, qdescs, head, MatchAlgo::Greedy);
    rank_full(index.ids(), &scores)
}

pub fn score_desc_per_element_topk(
    index: &ElementIndex,
    qdescs: &[Vec<f64>],
    head: &Head,
    k: usize,
    algo: MatchAlgo,
) -> RankedResult {
    let scores = desc_per_element_scores(index, qdescs, head, algo);
    rank_topk(index.ids(), &scores, k)
}

// ------------------------------------------------------------------
// Re-ranking
// ------------------------------------------------------------------

/// Rescore the top `n_r` entries of `initial` with greedy per-element
/// matching and re-sort them among themselves; the remainder keeps its
/// initial order below them. `n_r` larger than the list is clamped.
pub fn rerank(
    initial: &RankedResult,
    n_r: usize,
    elem_index: &ElementIndex,
    qdescs_elem: &[Vec<f64>],
    head: &Head,
) -> Result<RankedResult> {
    let n_r = n_r.min(initial.entries.len());
    let mut rescored: Vec<(String, f64)> = Vec::with_capacity(n_r);
    for (id, _) in &initial.entries[..n_r] {
        let row = elem_index.row_of_id(id).ok_or_else(|| {
            Error::InvalidArgument(format!("set {id:?} is missing from the element index"))
        })?;
        let score = score_set_greedy(
            elem_index.elements(row),
            elem_index.elem_dim(),
            qdescs_elem,
            head,
        );
        rescored.push((id.clone(), score));
    }
    rescored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rescored.extend_from_slice(&initial.entries[n_r..]);
    Ok(RankedResult { entries: rescored })
}

// ------------------------------------------------------------------
// Pre-tagging
// ------------------------------------------------------------------

/// How the per-example evidence is combined into one tag decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagRule {
    /// Mean over the examples of the best-element score (default).
    MeanExample,
    /// Maximum over the examples.
    MaxExample,
}

/// Closed-world inverted index: identity -> sorted postings of set rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagIndex {
    pub vocabulary: BTreeSet<u64>,
    pub postings: BTreeMap<u64, Vec<u32>>,
    pub set_ids: Vec<String>,
    pub threshold: f64,
    pub rule: TagRule,
}

/// Tag each set with every identity whose combined example score against the
/// set's best-matching element exceeds `threshold`. `tag_examples` carries
/// `n_tag` element-space example descriptors per identity.
pub fn build_tag_index(
    index: &ElementIndex,
    tag_examples: &[(u64, Vec<Vec<f64>>)],
    head: &Head,
    threshold: f64,
    rule: TagRule,
) -> Result<TagIndex> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidArgument("tag threshold must be positive".into()));
    }
    if tag_examples.iter().any(|(_, ex)| ex.is_empty()) {
        return Err(Error::InvalidArgument("identity without tag examples".into()));
    }
    let dim = index.elem_dim();
    let mut vocabulary = BTreeSet::new();
    let mut postings: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (identity, examples) in tag_examples {
        if !vocabulary.insert(*identity) {
            return Err(Error::InvalidArgument(format!(
                "identity {identity} listed twice in tag examples"
            )));
        }
        let mut rows = Vec::new();
        for set_row in 0..index.len() {
            let elements = index.elements(set_row);
            let mut combined: f64 = match rule {
                TagRule::MeanExample => 0.0,
                TagRule::MaxExample => f64::NEG_INFINITY,
            };
            for example in examples {
                let mut best = f64::NEG_INFINITY;
                for element in elements.chunks_exact(dim) {
                    let mut acc = 0.0f64;
                    for (x, y) in example.iter().zip(element) {
                        acc += x * (*y as f64);
                    }
                    let s = logistic(head.weight * acc + head.bias);
                    if s > best {
                        best = s;
                    }
                }
                match rule {
                    TagRule::MeanExample => combined += best,
                    TagRule::MaxExample => combined = combined.max(best),
                }
            }
            if rule == TagRule::MeanExample {
                combined /= examples.len() as f64;
            }
            if combined > threshold {
                rows.push(set_row as u32);
            }
        }
        if !rows.is_empty() {
            postings.insert(*identity, rows);
        }
    }
    Ok(TagIndex {
        vocabulary,
        postings,
        set_ids: index.ids().to_vec(),
        threshold,
        rule,
    })
}

/// Rank all sets by `|tags(set) ∩ query|` via a counting merge over the
/// postings lists. Querying an identity outside the vocabulary is an error.
pub fn score_pretag(tags: &TagIndex, query_identities: &[u64]) -> Result<RankedResult> {
    if query_identities.is_empty() {
        return Err(Error::InvalidArgument("empty pre-tag query".into()));
    }
    for id in query_identities {
        if !tags.vocabulary.contains(id) {
            return Err(Error::UnknownIdentity(*id));
        }
    }
    let mut counts = vec![0u32; tags.set_ids.len()];
    for id in query_identities {
        if let Some(rows) = tags.postings.get(id) {
            for &row in rows {
                counts[row as usize] += 1;
            }
        }
    }
    let scores: Vec<f64> = counts.into_iter().map(f64::from).collect();
    Ok(rank_full(&tags.set_ids, &scores))
}
