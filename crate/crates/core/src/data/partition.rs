//! Client partitioners over the training split: IID, Dirichlet label skew,
//! and label-sorted shards. Every plan is disjoint, covers the whole split,
//! and leaves no client empty.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
    Shards { per_client: usize },
}

/// Per-client index lists into the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }

    /// Checks disjointness, full coverage of `0..n_examples`, and that no
    /// client is empty.
    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let mut seen = vec![false; n_examples];
        for (id, indices) in self.clients.iter().enumerate() {
            if indices.is_empty() {
                return Err(Error::Partition(format!("client {id} received no examples")));
            }
            for &i in indices {
                if i >= n_examples {
                    return Err(Error::Partition(format!(
                        "client {id} references example {i} beyond the split of {n_examples}"
                    )));
                }
                if seen[i] {
                    return Err(Error::Partition(format!(
                        "example {i} assigned to more than one client"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Partition(format!(
                "example {missing} not assigned to any client"
            )));
        }
        Ok(())
    }
}

fn check_client_count(n_examples: usize, n_clients: usize) -> Result<()> {
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if n_clients > n_examples {
        return Err(Error::Partition(format!(
            "{n_clients} clients cannot all receive an example from a split of {n_examples}"
        )));
    }
    Ok(())
}

/// Random permutation dealt into near-equal parts (sizes differ by at most
/// one; earlier clients take the remainder).
pub fn partition_iid(dataset: &Dataset, n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    check_client_count(dataset.len(), n_clients)?;
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let base = dataset.len() / n_clients;
    let extra = dataset.len() % n_clients;
    let mut clients = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for id in 0..n_clients {
        let take = base + usize::from(id < extra);
        clients.push(indices[cursor..cursor + take].to_vec());
        cursor += take;
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Iid,
        seed,
        clients,
    })
}

/// Dirichlet proportions via normalized Gamma draws.
fn dirichlet_proportions<R: Rng>(rng: &mut R, alpha: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-300)).collect();
    let sum: f64 = draws.iter().sum();
    for d in draws.iter_mut() {
        *d /= sum;
    }
    draws
}

/// Integer counts summing to `total`, apportioned to `proportions` by the
/// largest-remainder rule (ties to the lower client id).
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0;
    for (id, &p) in proportions.iter().enumerate() {
        let quota = p * total as f64;
        let base = quota.floor() as usize;
        counts.push(base);
        assigned += base;
        fractions.push((id, quota - base as f64));
    }
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(id, _) in fractions.iter().take(total - assigned) {
        counts[id] += 1;
    }
    counts
}

/// Label-skew partition: for each class, draw client proportions from
/// Dirichlet(alpha) and deal that class's examples accordingly. Clients
/// that end empty take one example from the currently largest client.
pub fn partition_dirichlet(
    dataset: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Partition(format!(
            "dirichlet alpha must be positive and finite, got {alpha}"
        )));
    }
    check_client_count(dataset.len(), n_clients)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for class in 0..dataset.classes() {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.label(i) == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let proportions = dirichlet_proportions(&mut rng, alpha, n_clients);
        let counts = largest_remainder(&proportions, members.len());
        let mut cursor = 0;
        for (id, &count) in counts.iter().enumerate() {
            clients[id].extend_from_slice(&members[cursor..cursor + count]);
            cursor += count;
        }
    }
    // Severe skew can starve a client; top it up from the largest one.
    loop {
        let Some(empty) = clients.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = (0..n_clients)
            .max_by_key(|&id| (clients[id].len(), usize::MAX - id))
            .expect("at least one client");
        let moved = clients[largest].pop().expect("largest client is non-empty");
        clients[empty].push(moved);
    }
    Ok(PartitionPlan {
        scheme: PartitionScheme::Dirichlet { alpha },
        seed,
        clients,
    })
}

/// Sorts indices by label, cuts them into `n_clients * per_client` equal
/// shards, and deals each client `per_client` random shards.
pub fn partition_shards(
    dataset: &Dataset,
    n_clients: usize,
    per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    check_client_count(dataset.len(), n_clients)?;
    if per_client == 0 {
        return Err(Error::Partition("shards per client must be positive".into()));
    }
    let total_shards = n_clients * per_client;
    if dataset.len() % total_shards != 0 {
        return Err(Error::Partition(format!(
            "{} examples cannot be cut into {total_shards} equal shards",
            dataset.len()
        )));
    }
    let shard_size = dataset.len() / total_shards;
    let mut sorted: Vec<usize> = (0..dataset.len()).collect();
    sorted.sort_by_key(|&i| dataset.label(i));
    let mut shard_ids: Vec<usize> = (0..total_shards).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    shard_ids.shuffle(&mut rng);
    let clients = (0..n_clients)
        .map(|id| {
            shard_ids[id * per_client..(id + 1) * per_client]
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect()
        })
        .collect();
    Ok(PartitionPlan {
        scheme: PartitionScheme::Shards { per_client },
        seed,
        clients,
    })
}
