//! The federated-averaging round protocol: client sampling, local training,
//! sample-weighted aggregation, global evaluation, and the multi-round
//! orchestration loop.
//!
//! Within a round the sampled clients are independent: each owns a copy of
//! the global parameters, a fresh optimizer state, and a dedicated RNG
//! stream. Results are combined in client-id order, so output bits do not
//! depend on scheduling.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    preprocess, preprocess_at, preprocess_center, ChannelStats, Dataset, PartitionPlan,
    PreprocessOpts,
};
use crate::error::{Error, Result};
use crate::model::{backward, forward, init_params, InputShape, ModelParams, ModelSpec};
use crate::optim::{adamw_step, cross_entropy, AdamWState};
use crate::seeding::{stream_rng, stream_seed_u64};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

/// How aggregation and the global loss weight each client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `n_i / sum(n_j)` over the participating set; weights sum to one.
    #[default]
    SampleProportional,
    /// `n_i / N` with `N` the total number of devices. Exposed for
    /// side-by-side demonstration only; weights do not sum to one unless
    /// the mean shard size is exactly one.
    DeviceCount,
}

impl Weighting {
    fn weights(self, sizes: &[u64], total_clients: usize) -> Vec<f64> {
        match self {
            Weighting::SampleProportional => {
                let total: u64 = sizes.iter().sum();
                sizes.iter().map(|&n| n as f64 / total as f64).collect()
            }
            Weighting::DeviceCount => sizes
                .iter()
                .map(|&n| n as f64 / total_clients as f64)
                .collect(),
        }
    }
}

/// Crop policy for global evaluation. Evaluation is deterministic either
/// way: the random variant derives its offsets from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalCrop {
    #[default]
    Center,
    Random,
}

/// Everything the round protocol is parameterized by.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    /// Total number of clients N.
    pub clients: usize,
    /// Clients sampled per round K.
    pub clients_per_round: usize,
    /// Global rounds T.
    pub rounds: u64,
    /// Local epochs per round E.
    pub local_epochs: u64,
    /// Mini-batch size b.
    pub batch_size: usize,
    pub optimizer: crate::optim::AdamWHyper,
    /// Proximal coefficient mu; zero disables the proximal term.
    pub proximal_mu: f64,
    /// Master seed every RNG stream derives from.
    pub seed: u64,
    pub weighting: Weighting,
    pub eval_crop: EvalCrop,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(Error::Config(format!(
                "clients_per_round {} outside [1, {}]",
                self.clients_per_round, self.clients
            )));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.proximal_mu >= 0.0 && self.proximal_mu.is_finite()) {
            return Err(Error::Config(format!(
                "proximal_mu must be non-negative and finite, got {}",
                self.proximal_mu
            )));
        }
        self.optimizer.validate()
    }
}

/// One simulated device: its id, the training indices it owns, and the
/// per-round stats it has reported.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub history: Vec<RoundStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub round: u64,
    pub loss: f64,
    pub accuracy: f64,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>) -> ClientState {
        ClientState {
            id,
            indices,
            history: Vec::new(),
        }
    }

    pub fn n_examples(&self) -> usize {
        self.indices.len()
    }
}

/// Final-epoch training stats returned by [`local_train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStats {
    pub loss: f64,
    pub accuracy: f64,
    pub steps: u64,
}

/// Per-round metrics record, the stream the experiment runner consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub sampled_clients: Vec<usize>,
    pub client_sizes: Vec<u64>,
    pub client_train_loss: Vec<f64>,
    pub client_train_acc: Vec<f64>,
    pub global_test_loss: f64,
    pub global_test_acc: f64,
}

/// Uniform sample of `k` distinct client ids out of `n_clients`, returned
/// in ascending order.
pub fn sample_clients<R: Rng>(n_clients: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n_clients {
        return Err(Error::Config(format!(
            "cannot sample {k} distinct clients out of {n_clients}"
        )));
    }
    let mut ids = rand::seq::index::sample(rng, n_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-weighted mean of client updates; the weights over the
/// participating set sum to one.
pub fn aggregate(updates: &[(u64, ModelParams)]) -> Result<ModelParams> {
    aggregate_with(Weighting::SampleProportional, updates.len(), updates)
}

pub fn aggregate_with(
    weighting: Weighting,
    total_clients: usize,
    updates: &[(u64, ModelParams)],
) -> Result<ModelParams> {
    let (_, first) = updates
        .first()
        .ok_or_else(|| Error::Protocol("aggregate received no updates".into()))?;
    for (n, params) in updates {
        if *n == 0 {
            return Err(Error::Protocol("client reported zero samples".into()));
        }
        if params.layout != first.layout {
            return Err(Error::Layout(
                "aggregate received updates with differing layouts".into(),
            ));
        }
    }
    let sizes: Vec<u64> = updates.iter().map(|(n, _)| *n).collect();
    let weights = weighting.weights(&sizes, total_clients);
    let mut values = vec![0.0; first.values.len()];
    for ((_, params), w) in updates.iter().zip(&weights) {
        for (acc, v) in values.iter_mut().zip(&params.values) {
            *acc += w * v;
        }
    }
    Ok(ModelParams {
        values,
        layout: first.layout.clone(),
    })
}

/// Sample-weighted mean of per-client losses.
pub fn global_loss(per_client: &[(u64, f64)]) -> Result<f64> {
    global_loss_with(Weighting::SampleProportional, per_client.len(), per_client)
}

pub fn global_loss_with(
    weighting: Weighting,
    total_clients: usize,
    per_client: &[(u64, f64)],
) -> Result<f64> {
    if per_client.is_empty() {
        return Err(Error::Protocol("global loss over no clients".into()));
    }
    if per_client.iter().any(|(n, _)| *n == 0) {
        return Err(Error::Protocol("client reported zero samples".into()));
    }
    let sizes: Vec<u64> = per_client.iter().map(|(n, _)| *n).collect();
    let weights = weighting.weights(&sizes, total_clients);
    Ok(per_client
        .iter()
        .zip(&weights)
        .map(|((_, loss), w)| w * loss)
        .sum())
}

/// Shared context for a federation run.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub config: &'a FederationConfig,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub plan: &'a PartitionPlan,
    pub preprocess: &'a PreprocessOpts,
    /// Standardization statistics, computed from the training split.
    pub stats: &'a ChannelStats,
}

fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn assemble_batch(input: InputShape, examples: &[Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack(examples)?;
    match input {
        InputShape::Features(f) => stacked.reshape(&[examples.len(), f]),
        InputShape::Image { .. } => Ok(stacked),
    }
}

/// E epochs of mini-batch AdamW on the client's shard, starting from a copy
/// of the global parameters with a fresh optimizer state. Shuffles each
/// epoch and keeps the last short batch. With `proximal_mu > 0` the
/// gradient of `(mu/2)*||theta - w_global||^2` is added before each step.
/// Returns the updated parameters plus final-epoch mean loss and accuracy.
pub fn local_train(
    fed: &Federation<'_>,
    client: &ClientState,
    global: &ModelParams,
    rng: &mut ChaCha20Rng,
) -> Result<(ModelParams, LocalStats)> {
    if client.indices.is_empty() {
        return Err(Error::Protocol(format!(
            "client {} owns no training examples",
            client.id
        )));
    }
    let config = fed.config;
    let mu = config.proximal_mu;
    let mut params = global.clone();
    let mut state = AdamWState::new(params.len());
    let mut order = client.indices.clone();
    let mut final_loss_sum = 0.0;
    let mut final_correct = 0usize;
    let mut final_seen = 0usize;
    for epoch in 0..config.local_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let last_epoch = epoch + 1 == config.local_epochs;
        for chunk in order.chunks(config.batch_size) {
            let examples = chunk
                .iter()
                .map(|&i| preprocess(fed.train.image(i), fed.preprocess, fed.stats, rng))
                .collect::<Result<Vec<_>>>()?;
            let inputs = assemble_batch(fed.spec.input, &examples)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| fed.train.label(i)).collect();
            let (logits, cache) = forward(fed.spec, &params, &inputs)?;
            let (loss, grad_logits) = cross_entropy(&logits, &labels)?;
            let mut grad = backward(fed.spec, &params, &cache, &grad_logits)?;
            if mu > 0.0 {
                for ((g, &theta), &anchor) in
                    grad.iter_mut().zip(&params.values).zip(&global.values)
                {
                    *g += mu * (theta - anchor);
                }
            }
            adamw_step(&mut params.values, &grad, &mut state, &config.optimizer)?;
            if last_epoch {
                final_loss_sum += loss * chunk.len() as f64;
                final_seen += chunk.len();
                for (row, &label) in labels.iter().enumerate() {
                    let logit_row =
                        &logits.data()[row * fed.spec.classes..(row + 1) * fed.spec.classes];
                    if first_max(logit_row) == label {
                        final_correct += 1;
                    }
                }
            }
        }
    }
    Ok((
        params,
        LocalStats {
            loss: final_loss_sum / final_seen as f64,
            accuracy: final_correct as f64 / final_seen as f64,
            steps: state.steps_taken(),
        },
    ))
}

/// Crop policy for one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCropMode {
    Center,
    /// Uniform-random crops from a dedicated seed; still deterministic and
    /// never flips.
    Random { seed: u64 },
}

/// Argmax accuracy (ties to the lowest class id) and mean cross-entropy
/// over the test split. No random augmentation: flips are disabled and
/// crops follow the policy.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ModelParams,
    test: &Dataset,
    stats: &ChannelStats,
    opts: &PreprocessOpts,
    crop: EvalCropMode,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty test split".into()));
    }
    if test.classes() != spec.classes {
        return Err(Error::Config(format!(
            "test split has {} classes but the model emits {}",
            test.classes(),
            spec.classes
        )));
    }
    let mut crop_rng = match crop {
        EvalCropMode::Center => None,
        EvalCropMode::Random { seed } => {
            Some(<ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed))
        }
    };
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let examples = chunk
            .iter()
            .map(|&i| {
                let img = test.image(i);
                match crop_rng.as_mut() {
                    None => preprocess_center(img, opts, stats),
                    Some(rng) => {
                        let top = rng.random_range(0..=img.height - opts.crop_height);
                        let left = rng.random_range(0..=img.width - opts.crop_width);
                        preprocess_at(img, opts, stats, top, left, false)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs = assemble_batch(spec.input, &examples)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| test.label(i)).collect();
        let (logits, _) = forward(spec, params, &inputs)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (row, &label) in labels.iter().enumerate() {
            let logit_row = &logits.data()[row * spec.classes..(row + 1) * spec.classes];
            if first_max(logit_row) == label {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / test.len() as f64,
        loss_sum / test.len() as f64,
    ))
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub rounds: Vec<RoundRecord>,
    pub params: ModelParams,
    pub clients: Vec<ClientState>,
}

fn check_model_input(spec: &ModelSpec, channels: usize, crop_h: usize, crop_w: usize) -> Result<()> {
    let ok = match spec.input {
        InputShape::Features(f) => f == channels * crop_h * crop_w,
        InputShape::Image {
            channels: c,
            height,
            width,
        } => (c, height, width) == (channels, crop_h, crop_w),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "model input {:?} does not match preprocessed examples {channels}x{crop_h}x{crop_w}",
            spec.input
        )))
    }
}

/// Runs sampled clients, possibly across threads, collecting results in
/// submission order so scheduling never changes the output.
fn run_clients<T: Send>(
    ids: &[usize],
    threads: usize,
    work: impl Fn(usize) -> T + Sync,
) -> Vec<T> {
    if threads <= 1 || ids.len() <= 1 {
        return ids.iter().map(|&id| work(id)).collect();
    }
    let workers = threads.min(ids.len());
    let chunk = ids.len().div_ceil(workers);
    let mut results: Vec<Option<T>> = (0..ids.len()).map(|_| None).collect();
    let work = &work;
    std::thread::scope(|scope| {
        for (id_chunk, out_chunk) in ids.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (slot, &id) in out_chunk.iter_mut().zip(id_chunk) {
                    *slot = Some(work(id));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot is filled by its worker"))
        .collect()
}

/// The round loop: sample K clients, broadcast the global parameters, train
/// locally in parallel, aggregate by sample count, evaluate on the held-out
/// split, repeat for T rounds. Fully deterministic given the master seed,
/// regardless of `threads`.
pub fn run_federation(fed: &Federation<'_>, threads: usize) -> Result<FederationOutcome> {
    let config = fed.config;
    config.validate()?;
    if fed.plan.n_clients() != config.clients {
        return Err(Error::Config(format!(
            "partition plan covers {} clients but the config declares {}",
            fed.plan.n_clients(),
            config.clients
        )));
    }
    fed.plan.validate(fed.train.len())?;
    fed.preprocess.validate(fed.train.height(), fed.train.width())?;
    fed.preprocess.validate(fed.test.height(), fed.test.width())?;
    check_model_input(
        fed.spec,
        fed.train.channels(),
        fed.preprocess.crop_height,
        fed.preprocess.crop_width,
    )?;
    if fed.train.classes() != fed.spec.classes {
        return Err(Error::Config(format!(
            "training split has {} classes but the model emits {}",
            fed.train.classes(),
            fed.spec.classes
        )));
    }
    if fed.test.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty test split".into()));
    }

    let mut params = init_params(fed.spec, stream_seed_u64(config.seed, "init", 0, 0));
    let mut clients: Vec<ClientState> = fed
        .plan
        .clients
        .iter()
        .enumerate()
        .map(|(id, indices)| ClientState::new(id, indices.clone()))
        .collect();
    let mut rounds = Vec::with_capacity(config.rounds as usize);

    for round in 1..=config.rounds {
        let mut sample_rng = stream_rng(config.seed, "sample", round, 0);
        let sampled = sample_clients(config.clients, config.clients_per_round, &mut sample_rng)?;

        let results = run_clients(&sampled, threads, |id| {
            let mut rng = stream_rng(config.seed, "train", round, id as u64);
            local_train(fed, &clients[id], &params, &mut rng)
        });

        let mut updates = Vec::with_capacity(sampled.len());
        let mut record = RoundRecord {
            round,
            sampled_clients: sampled.clone(),
            client_sizes: Vec::with_capacity(sampled.len()),
            client_train_loss: Vec::with_capacity(sampled.len()),
            client_train_acc: Vec::with_capacity(sampled.len()),
            global_test_loss: 0.0,
            global_test_acc: 0.0,
        };
        for (&id, result) in sampled.iter().zip(results) {
            let (update, stats) = result.map_err(|e| {
                Error::Protocol(format!("client {id} failed in round {round}: {e}"))
            })?;
            record.client_sizes.push(clients[id].n_examples() as u64);
            record.client_train_loss.push(stats.loss);
            record.client_train_acc.push(stats.accuracy);
            clients[id].history.push(RoundStats {
                round,
                loss: stats.loss,
                accuracy: stats.accuracy,
            });
            updates.push((clients[id].n_examples() as u64, update));
        }
        params = aggregate_with(config.weighting, config.clients, &updates)?;

        let crop_mode = match config.eval_crop {
            EvalCrop::Center => EvalCropMode::Center,
            EvalCrop::Random => EvalCropMode::Random {
                seed: stream_seed_u64(config.seed, "eval", round, 0),
            },
        };
        let (acc, loss) = evaluate(fed.spec, &params, fed.test, fed.stats, fed.preprocess, crop_mode)?;
        record.global_test_acc = acc;
        record.global_test_loss = loss;
        rounds.push(record);
    }

    Ok(FederationOutcome {
        rounds,
        params,
        clients,
    })
}
