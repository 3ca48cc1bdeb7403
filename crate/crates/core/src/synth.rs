//! Deterministic synthetic identity embeddings.
//!
//! Stands in for a learned feature extractor: a gallery is a set of unit-norm
//! prototype vectors on the `dim`-sphere, and an element descriptor is a
//! prototype perturbed by Gaussian noise and re-normalized. Everything is a
//! pure function of `(inputs, seed)` using ChaCha8, so datasets regenerate
//! bit-identically on any platform and from any number of threads.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::normalize_in_place;
use crate::scalar::{from_f64, to_f64, Real};

/// One synthetic identity: a unit-norm cluster centre on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityPrototype<F> {
    pub id: u64,
    pub center: Vec<F>,
}

/// One element descriptor, optionally labelled with the identity it samples.
/// An absent identity marks a distractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementDescriptor<F> {
    pub vector: Vec<F>,
    pub identity: Option<u64>,
}

/// Generate `n_identities` prototypes of dimension `dim`: i.i.d. isotropic
/// Gaussian draws, normalized to the unit sphere. Identity ids are
/// `first_id..first_id + n` so galleries and distractor pools can be kept
/// disjoint.
pub fn gen_gallery_with_ids<F: Real>(
    n_identities: usize,
    dim: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<IdentityPrototype<F>>> {
    if n_identities < 1 {
        return Err(Error::InvalidArgument("need at least one identity".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument("descriptor dimension must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gallery = Vec::with_capacity(n_identities);
    for i in 0..n_identities {
        let mut center: Vec<F> = (0..dim)
            .map(|_| from_f64::<F>(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        normalize_in_place(&mut center, "gallery prototype")?;
        gallery.push(IdentityPrototype {
            id: first_id + i as u64,
            center,
        });
    }
    Ok(gallery)
}

/// Generate a gallery with ids starting at 0.
pub fn gen_gallery<F: Real>(
    n_identities: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<IdentityPrototype<F>>> {
    gen_gallery_with_ids(n_identities, dim, seed, 0)
}

/// Draw one labelled sample of a prototype using a dedicated stream.
///
/// `noise_sigma` is the expected Euclidean norm of the perturbation relative
/// to the unit-norm centre (each coordinate gets std `sigma / sqrt(dim)`), so
/// the centre-to-sample cosine concentrates around `1/sqrt(1 + sigma^2)`
/// independent of dimension.
pub fn sample_element<F: Real>(
    proto: &IdentityPrototype<F>,
    noise_sigma: f64,
    seed: u64,
) -> Result<ElementDescriptor<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_element_with(proto, noise_sigma, &mut rng)
}

/// Same as [`sample_element`] but drawing from a caller-owned stream; this is
/// what batch and dataset builders use so one seed covers a whole synthesis
/// pass.
pub fn sample_element_with<F: Real>(
    proto: &IdentityPrototype<F>,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<ElementDescriptor<F>> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
    }
    if noise_sigma == 0.0 {
        return Ok(ElementDescriptor {
            vector: proto.center.clone(),
            identity: Some(proto.id),
        });
    }
    let dim = proto.center.len();
    let coord_sigma = noise_sigma / (dim as f64).sqrt();
    let mut vector: Vec<F> = proto
        .center
        .iter()
        .map(|c| {
            let n: f64 = rng.sample(StandardNormal);
            *c + from_f64::<F>(coord_sigma * n)
        })
        .collect();
    normalize_in_place(&mut vector, "sampled element")?;
    Ok(ElementDescriptor {
        vector,
        identity: Some(proto.id),
    })
}

#[derive(Serialize, Deserialize)]
struct GalleryRecord {
    id: u64,
    center: Vec<f64>,
}

/// Write a gallery as JSON-lines, one `{id, center}` record per identity.
pub fn write_gallery_jsonl<F: Real, W: Write>(gallery: &[IdentityPrototype<F>], mut w: W) -> Result<()> {
    for proto in gallery {
        let rec = GalleryRecord {
            id: proto.id,
            center: proto.center.iter().map(|x| to_f64(*x)).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_gallery_jsonl<F: Real, R: BufRead>(r: R) -> Result<Vec<IdentityPrototype<F>>> {
    let mut gallery = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GalleryRecord = serde_json::from_str(&line)?;
        gallery.push(IdentityPrototype {
            id: rec.id,
            center: rec.center.into_iter().map(from_f64::<F>).collect(),
        });
    }
    Ok(gallery)
}
