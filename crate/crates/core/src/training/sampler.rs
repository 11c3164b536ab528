use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, DatasetManifest, Domain};
use crate::error::{Error, Result};

/// `P` identities with `K` images each per batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub domain_aware: bool,
    pub seed: u64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            domain_aware: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Pool {
    subject: String,
    /// One group per domain (domain-aware) or a single group of everything.
    groups: Vec<Vec<usize>>,
}

/// Deterministic PK batch generator over manifest record indices.
///
/// In domain-aware mode only subjects with media in every sampling domain
/// are eligible and each identity contributes `K / n_domains` images per
/// domain. An epoch hands every eligible identity out at least once.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    spec: BatchSpec,
    domains: Vec<Domain>,
    pools: Vec<Pool>,
}

impl BatchSampler {
    /// Samples over all four domains (domain-aware) or all records (random).
    pub fn new(manifest: &DatasetManifest, spec: &BatchSpec) -> Result<Self> {
        Self::with_domains(manifest, spec, &Domain::ALL)
    }

    /// Like [`BatchSampler::new`] with the domain-aware constraint taken
    /// over `domains` instead of all four.
    pub fn with_domains(
        manifest: &DatasetManifest,
        spec: &BatchSpec,
        domains: &[Domain],
    ) -> Result<Self> {
        if spec.p < 2 {
            return Err(Error::config(format!(
                "P must be at least 2, got {}",
                spec.p
            )));
        }
        if spec.k < 2 {
            return Err(Error::config(format!(
                "K must be at least 2, got {}",
                spec.k
            )));
        }
        if domains.is_empty() {
            return Err(Error::config("no sampling domains"));
        }
        if spec.domain_aware && !spec.k.is_multiple_of(domains.len()) {
            return Err(Error::config(format!(
                "domain-aware sampling needs K divisible by {} domains, got K={}",
                domains.len(),
                spec.k
            )));
        }
        let mut pools = Vec::new();
        for (subject, idx) in manifest.subject_index() {
            let groups = if spec.domain_aware {
                let mut by_domain: BTreeMap<Domain, Vec<usize>> = BTreeMap::new();
                for &i in idx {
                    by_domain
                        .entry(manifest.records()[i].domain)
                        .or_default()
                        .push(i);
                }
                let groups: Vec<Vec<usize>> = domains
                    .iter()
                    .filter_map(|d| by_domain.get(d).cloned())
                    .collect();
                if groups.len() != domains.len() {
                    continue;
                }
                groups
            } else {
                vec![idx.clone()]
            };
            pools.push(Pool {
                subject: subject.clone(),
                groups,
            });
        }
        if pools.len() < spec.p {
            return Err(Error::config(format!(
                "{} eligible identities, fewer than P={}",
                pools.len(),
                spec.p
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            domains: domains.to_vec(),
            pools,
        })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn eligible_subjects(&self) -> Vec<&str> {
        self.pools.iter().map(|p| p.subject.as_str()).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.spec.p * self.spec.k
    }

    fn per_group(&self) -> usize {
        if self.spec.domain_aware {
            self.spec.k / self.domains.len()
        } else {
            self.spec.k
        }
    }

    /// Batches of epoch `epoch`, each a list of `P·K` record indices grouped
    /// by identity.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.spec.seed, 0x5A4D, epoch]));
        let q = self.per_group();
        let chunks: Vec<Vec<Vec<usize>>> = self
            .pools
            .iter()
            .map(|pool| {
                let shuffled: Vec<Vec<usize>> = pool
                    .groups
                    .iter()
                    .map(|g| {
                        let mut g = g.clone();
                        g.shuffle(&mut rng);
                        g
                    })
                    .collect();
                let n_chunks = shuffled
                    .iter()
                    .map(|g| g.len() / q)
                    .min()
                    .unwrap_or(0)
                    .max(1);
                (0..n_chunks)
                    .map(|c| {
                        shuffled
                            .iter()
                            .flat_map(|g| (0..q).map(move |j| g[(c * q + j) % g.len()]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut priority: Vec<usize> = (0..self.pools.len()).collect();
        priority.shuffle(&mut rng);
        let mut rank = vec![0; self.pools.len()];
        for (r, &id) in priority.iter().enumerate() {
            rank[id] = r;
        }
        let mut used = vec![0usize; self.pools.len()];
        let mut batches = Vec::new();
        let p = self.spec.p;
        loop {
            let mut active: Vec<usize> = (0..self.pools.len())
                .filter(|&i| used[i] < chunks[i].len())
                .collect();
            active.sort_by_key(|&i| (std::cmp::Reverse(chunks[i].len() - used[i]), rank[i]));
            let chosen: Vec<(usize, usize)> = if active.len() >= p {
                active[..p].iter().map(|&i| (i, used[i])).collect()
            } else if active.iter().any(|&i| used[i] == 0) {
                // top up the last batch so no identity is skipped this epoch
                let mut c: Vec<(usize, usize)> = active.iter().map(|&i| (i, used[i])).collect();
                c.extend(
                    priority
                        .iter()
                        .filter(|i| !active.contains(i))
                        .take(p - active.len())
                        .map(|&i| (i, 0)),
                );
                c
            } else {
                break;
            };
            let mut batch = Vec::with_capacity(self.batch_size());
            for (id, chunk) in chosen {
                batch.extend_from_slice(&chunks[id][chunk]);
                used[id] = used[id].max(chunk + 1);
            }
            batches.push(batch);
        }
        batches
    }

    /// Endless stream of batches, epoch after epoch.
    pub fn stream(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0u64..).flat_map(move |e| self.epoch(e))
    }
}

/// Domain-aware stream over all four domains.
pub fn domain_aware_batches(manifest: &DatasetManifest, spec: &BatchSpec) -> Result<BatchSampler> {
    if !spec.domain_aware {
        return Err(Error::config(
            "domain_aware_batches needs a domain-aware spec",
        ));
    }
    BatchSampler::new(manifest, spec)
}

/// Identity-balanced stream without any domain constraint.
pub fn random_batches(manifest: &DatasetManifest, spec: &BatchSpec) -> Result<BatchSampler> {
    let spec = BatchSpec {
        domain_aware: false,
        ..spec.clone()
    };
    BatchSampler::new(manifest, &spec)
}
