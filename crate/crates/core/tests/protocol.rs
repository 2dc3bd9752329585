//! Protocol-level oracles: a single-client federation must replay a
//! centralized training loop bit for bit, and the weighted global loss must
//! agree with pooled evaluation.

use fedsim_core::data::{gen_synthetic, partition_iid, preprocess, Dataset, PreprocessOpts};
use fedsim_core::fed::{
    evaluate, global_loss, run_federation, ClientState, EvalCrop, EvalCropMode, Federation,
    FederationConfig, Weighting,
};
use fedsim_core::model::{backward, forward, init_params, InputShape, ModelParams, ModelSpec};
use fedsim_core::optim::{adamw_step, cross_entropy, AdamWHyper, AdamWState};
use fedsim_core::seeding::{stream_rng, stream_seed_u64};
use fedsim_core::tensor::Tensor;
use rand::seq::SliceRandom;

fn env() -> (ModelSpec, Dataset, Dataset, PreprocessOpts) {
    let train = gen_synthetic(4, 30, 1, 16, 16, 500).unwrap();
    let test = gen_synthetic(4, 8, 1, 16, 16, 501).unwrap();
    let spec = ModelSpec::mlp(InputShape::Features(256), 16, 4).unwrap();
    let opts = PreprocessOpts::identity(16, 16);
    (spec, train, test, opts)
}

fn config(rounds: u64, local_epochs: u64, seed: u64) -> FederationConfig {
    FederationConfig {
        clients: 1,
        clients_per_round: 1,
        rounds,
        local_epochs,
        batch_size: 16,
        optimizer: AdamWHyper::new(1e-3, 1e-2).unwrap(),
        proximal_mu: 0.0,
        seed,
        weighting: Weighting::default(),
        eval_crop: EvalCrop::default(),
    }
}

/// Independent re-implementation of the training schedule a single-client
/// federation performs: per round, a fresh optimizer state and the
/// (master, "train", round, 0) stream drive shuffling, augmentation, and
/// AdamW steps over the client's shard.
fn centralized_oracle(
    spec: &ModelSpec,
    train: &Dataset,
    opts: &PreprocessOpts,
    shard: &[usize],
    cfg: &FederationConfig,
) -> (ModelParams, Vec<f64>) {
    let stats = train.stats().clone();
    let mut params = init_params(spec, stream_seed_u64(cfg.seed, "init", 0, 0));
    let mut round_losses = Vec::new();
    for round in 1..=cfg.rounds {
        let mut rng = stream_rng(cfg.seed, "train", round, 0);
        let mut state = AdamWState::new(params.len());
        let mut order = shard.to_vec();
        let mut last_loss_sum = 0.0;
        let mut last_seen = 0usize;
        for epoch in 0..cfg.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let examples: Vec<Tensor> = chunk
                    .iter()
                    .map(|&i| preprocess(train.image(i), opts, &stats, &mut rng).unwrap())
                    .collect();
                let flat: Vec<f64> = examples.iter().flat_map(|t| t.data().to_vec()).collect();
                let inputs = Tensor::new(vec![chunk.len(), 256], flat).unwrap();
                let labels: Vec<usize> = chunk.iter().map(|&i| train.label(i)).collect();
                let (logits, cache) = forward(spec, &params, &inputs).unwrap();
                let (loss, grad_logits) = cross_entropy(&logits, &labels).unwrap();
                let grad = backward(spec, &params, &cache, &grad_logits).unwrap();
                adamw_step(&mut params.values, &grad, &mut state, &cfg.optimizer).unwrap();
                if epoch + 1 == cfg.local_epochs {
                    last_loss_sum += loss * chunk.len() as f64;
                    last_seen += chunk.len();
                }
            }
        }
        round_losses.push(last_loss_sum / last_seen as f64);
    }
    (params, round_losses)
}

#[test]
fn single_client_federation_replays_centralized_training_bit_exactly() {
    let (spec, train, test, opts) = env();
    let stats = train.stats().clone();
    for local_epochs in [1, 3] {
        let cfg = config(10, local_epochs, 42);
        let plan = partition_iid(&train, 1, 42).unwrap();
        let fed = Federation {
            spec: &spec,
            config: &cfg,
            train: &train,
            test: &test,
            plan: &plan,
            preprocess: &opts,
            stats: &stats,
        };
        let outcome = run_federation(&fed, 1).unwrap();
        let (oracle_params, oracle_losses) =
            centralized_oracle(&spec, &train, &opts, &plan.clients[0], &cfg);

        assert_eq!(outcome.params.values, oracle_params.values);
        let fed_losses: Vec<f64> = outcome
            .rounds
            .iter()
            .map(|r| r.client_train_loss[0])
            .collect();
        assert_eq!(fed_losses, oracle_losses);
    }
}

#[test]
fn federation_round_records_have_protocol_shape() {
    let (spec, train, test, opts) = env();
    let stats = train.stats().clone();
    let cfg = FederationConfig {
        clients: 6,
        clients_per_round: 3,
        rounds: 4,
        local_epochs: 1,
        batch_size: 16,
        optimizer: AdamWHyper::new(1e-3, 1e-2).unwrap(),
        proximal_mu: 0.0,
        seed: 9,
        weighting: Weighting::default(),
        eval_crop: EvalCrop::default(),
    };
    let plan = partition_iid(&train, 6, 9).unwrap();
    let fed = Federation {
        spec: &spec,
        config: &cfg,
        train: &train,
        test: &test,
        plan: &plan,
        preprocess: &opts,
        stats: &stats,
    };
    let outcome = run_federation(&fed, 2).unwrap();
    assert_eq!(outcome.rounds.len(), 4);
    for (i, record) in outcome.rounds.iter().enumerate() {
        assert_eq!(record.round, i as u64 + 1);
        assert_eq!(record.sampled_clients.len(), 3);
        let mut sorted = record.sampled_clients.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted, record.sampled_clients, "ids distinct and ordered");
        assert_eq!(record.client_sizes.len(), 3);
        assert_eq!(record.client_train_loss.len(), 3);
        assert_eq!(record.client_train_acc.len(), 3);
        assert!(record.global_test_loss.is_finite());
        assert!((0.0..=1.0).contains(&record.global_test_acc));
    }
}

#[test]
fn weighted_global_loss_equals_pooled_cross_entropy_under_shared_params() {
    let (spec, train, _, opts) = env();
    let stats = train.stats().clone();
    let params = init_params(&spec, 3);
    let plan = partition_iid(&train, 5, 17).unwrap();

    // Per-client mean loss on each shard under the shared parameters. The
    // shards are disjoint datasets, so evaluate() doubles as the local pass.
    let mut per_client = Vec::new();
    for indices in &plan.clients {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for &i in indices {
            images.extend_from_slice(train.image(i).pixels);
            labels.push(train.labels()[i]);
        }
        let shard = Dataset::new(1, 16, 16, images, labels, train.class_names().to_vec()).unwrap();
        let (_, loss) = evaluate(&spec, &params, &shard, &stats, &opts, EvalCropMode::Center).unwrap();
        per_client.push((indices.len() as u64, loss));
    }
    let weighted = global_loss(&per_client).unwrap();

    let (_, pooled) = evaluate(&spec, &params, &train, &stats, &opts, EvalCropMode::Center).unwrap();
    assert!(
        (weighted - pooled).abs() < 1e-12,
        "weighted {weighted} vs pooled {pooled}"
    );
}

#[test]
fn client_failure_aborts_the_round_naming_the_client() {
    let (spec, train, test, opts) = env();
    let stats = train.stats().clone();
    let cfg = FederationConfig {
        // Non-finite learning produces a numeric error inside the client.
        optimizer: AdamWHyper {
            learning_rate: 1e300,
            weight_decay: 1e300,
            ..AdamWHyper::default()
        },
        ..config(3, 2, 5)
    };
    let plan = partition_iid(&train, 1, 5).unwrap();
    let fed = Federation {
        spec: &spec,
        config: &cfg,
        train: &train,
        test: &test,
        plan: &plan,
        preprocess: &opts,
        stats: &stats,
    };
    let err = run_federation(&fed, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("client 0"), "error should name the client: {msg}");
}

#[test]
fn local_train_trajectory_is_a_pure_function_of_its_stream() {
    let (spec, train, test, opts) = env();
    let stats = train.stats().clone();
    let cfg = config(1, 2, 77);
    let plan = partition_iid(&train, 1, 77).unwrap();
    let fed = Federation {
        spec: &spec,
        config: &cfg,
        train: &train,
        test: &test,
        plan: &plan,
        preprocess: &opts,
        stats: &stats,
    };
    let client = ClientState::new(0, plan.clients[0].clone());
    let global = init_params(&spec, 1);
    let run = |seed: u64| {
        let mut rng = stream_rng(seed, "train", 1, 0);
        fedsim_core::fed::local_train(&fed, &client, &global, &mut rng).unwrap()
    };
    let (w1, s1) = run(123);
    let (w2, s2) = run(123);
    assert_eq!(w1.values, w2.values);
    assert_eq!(s1, s2);
    let (w3, _) = run(124);
    assert_ne!(w1.values, w3.values);
}
