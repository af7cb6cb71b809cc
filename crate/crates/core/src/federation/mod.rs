//! Round-based federated protocol: broadcast, parallel local training,
//! server-side scoring, weighted aggregation, plus standalone baselines.

mod record;
mod server;

pub use crate::config::{DataSource, FederationConfig, FreeRiderConfig, Strategy};
pub use record::{PhaseTimings, RoundRecord, RunLog};
pub use server::{aggregate, RoundScores, Server};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{self, Dataset};
use crate::linalg::{pearson, spearman};
use crate::nn::{self, LayerUpdate, ModelParams};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers == 0`.
pub fn in_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// Everything a run needs besides the protocol itself.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub initial: ModelParams,
    /// Test accuracy of each client trained alone; empty if not computed.
    pub standalone: Vec<f64>,
    pub free_rider: Option<usize>,
}

impl Cohort {
    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Dataset::len).collect()
    }
}

pub fn load_dataset(config: &FederationConfig) -> Result<Dataset> {
    match &config.data.source {
        DataSource::Blobs {
            classes,
            dim,
            per_class,
            separation,
        } => data::generate_blobs(*classes, *dim, *per_class, *separation, config.seed),
        DataSource::Idx { images, labels } => data::load_idx(images, labels),
    }
}

/// Keeps `pool_size` genuine samples of `shard` and pads with seeded
/// duplicates of them up to `target_size`.
pub fn make_free_rider(shard: &Dataset, target_size: usize, pool_size: usize, seed: u64) -> Result<Dataset> {
    if pool_size == 0 || target_size < pool_size || pool_size > shard.len() {
        return Err(Error::invalid(
            "free_rider.pool_size",
            format!(
                "pool {pool_size} / target {target_size} infeasible for a shard of {}",
                shard.len()
            ),
        ));
    }
    let mut rng = rng::stream(seed, Purpose::FreeRider, 0, 0);
    let mut all: Vec<usize> = (0..shard.len()).collect();
    all.shuffle(&mut rng);
    let mut pool = all[..pool_size].to_vec();
    pool.sort_unstable();
    let mut indices = pool.clone();
    indices.extend((pool_size..target_size).map(|_| pool[rng.random_range(0..pool_size)]));
    shard.subset(&indices)
}

/// Default free-rider pool: 1% of the mean genuine shard size, at least one.
pub fn default_pool_size(mean_shard: usize) -> usize {
    ((mean_shard as f64 * 0.01).round() as usize).max(1)
}

fn install_free_rider(config: &FederationConfig, shards: &mut [Dataset]) -> Result<Option<usize>> {
    let Some(fr) = &config.free_rider else {
        return Ok(None);
    };
    if fr.client >= shards.len() {
        return Err(Error::invalid(
            "free_rider.client",
            format!("client {} out of range for {} clients", fr.client, shards.len()),
        ));
    }
    let mean = (shards.iter().map(Dataset::len).sum::<usize>() as f64 / shards.len() as f64).round() as usize;
    let pool = fr.pool_size.unwrap_or_else(|| default_pool_size(mean));
    shards[fr.client] = make_free_rider(&shards[fr.client], mean, pool, config.seed)?;
    Ok(Some(fr.client))
}

/// Trains every client alone for all rounds from `initial` and evaluates it
/// on the shared test set.
pub fn standalone_accuracies(
    config: &FederationConfig,
    shards: &[Dataset],
    test: &Dataset,
    initial: &ModelParams,
) -> Result<Vec<f64>> {
    let spec = config.train_spec();
    in_pool(config.workers, || {
        shards
            .par_iter()
            .enumerate()
            .map(|(i, shard)| {
                let mut model = initial.clone();
                for t in 1..=spec.total_rounds {
                    let mut rng = rng::stream(config.seed, Purpose::Standalone, i as u64, t as u64);
                    model = nn::train_local(&model, shard, &spec, t, &mut rng)?.params;
                }
                nn::evaluate(&model, test)
            })
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn initial_model(config: &FederationConfig, input_dim: usize, classes: usize) -> Result<ModelParams> {
    let mut widths = vec![input_dim];
    widths.extend(&config.model.hidden);
    widths.push(classes);
    ModelParams::init(&widths, &mut rng::stream(config.seed, Purpose::Init, 0, 0))
}

/// Builds a cohort from explicit shards; computes standalone baselines when
/// `with_standalone` is set.
pub fn cohort_from_shards(
    config: &FederationConfig,
    mut shards: Vec<Dataset>,
    test: Dataset,
    with_standalone: bool,
) -> Result<Cohort> {
    config.validate()?;
    if shards.len() != config.n_clients {
        return Err(Error::Consistency(format!(
            "{} shards for n_clients = {}",
            shards.len(),
            config.n_clients
        )));
    }
    let free_rider = install_free_rider(config, &mut shards)?;
    let classes = shards
        .iter()
        .map(Dataset::classes)
        .chain(std::iter::once(test.classes()))
        .max()
        .unwrap_or(0);
    let initial = initial_model(config, test.dim(), classes)?;
    let standalone = if with_standalone {
        standalone_accuracies(config, &shards, &test, &initial)?
    } else {
        Vec::new()
    };
    Ok(Cohort {
        shards,
        test,
        initial,
        standalone,
        free_rider,
    })
}

/// Data, holdout, partition, optional free-rider, init and standalone baselines.
pub fn prepare_cohort(config: &FederationConfig) -> Result<Cohort> {
    config.validate()?;
    let ds = load_dataset(config)?;
    let (train, test) = data::holdout_split(&ds, config.data.test_fraction, config.seed)?;
    let shards = data::partition(&train, &config.partition_spec())?;
    cohort_from_shards(config, shards, test, true)
}

/// Output of one protocol round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub global: ModelParams,
    pub record: RoundRecord,
    pub timings: PhaseTimings,
    pub updates: Vec<LayerUpdate>,
}

/// Broadcast, local training, scoring, aggregation and evaluation for round `t`.
pub fn run_round(
    config: &FederationConfig,
    global: &ModelParams,
    cohort: &Cohort,
    server: &mut Server,
    round: usize,
) -> Result<RoundOutput> {
    if round == 0 || round > config.rounds {
        return Err(Error::ContractViolation(format!(
            "round {round} outside 1..={}",
            config.rounds
        )));
    }
    let spec = config.train_spec();
    let outcomes = cohort
        .shards
        .par_iter()
        .enumerate()
        .map(|(i, shard)| {
            let mut rng = rng::stream(config.seed, Purpose::Train, i as u64, round as u64);
            nn::train_local(global, shard, &spec, round, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut models = Vec::with_capacity(outcomes.len());
    let mut updates = Vec::with_capacity(outcomes.len());
    let mut losses = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        models.push(o.params);
        updates.push(o.update);
        losses.push(o.mean_loss);
    }

    let (scores, weights, mut timings) = server.weigh(&updates)?;
    let started = std::time::Instant::now();
    let next = aggregate(&models, &weights)?;
    timings.aggregation_ms = started.elapsed().as_secs_f64() * 1e3;

    let global_accuracy = nn::evaluate(&next, &cohort.test)?;
    let (pearson_c, spearman_c) = if cohort.standalone.len() == weights.len() {
        (
            pearson(weights.as_slice(), &cohort.standalone)?,
            spearman(weights.as_slice(), &cohort.standalone)?,
        )
    } else {
        (0.0, 0.0)
    };
    let record = RoundRecord::new(round, weights.into_vec(), scores, losses, global_accuracy, pearson_c, spearman_c);
    Ok(RoundOutput {
        global: next,
        record,
        timings,
        updates,
    })
}

/// Runs all rounds on a prepared cohort. `observer` sees every round's
/// client updates after aggregation.
pub fn run_federation_observed(
    config: &FederationConfig,
    cohort: &Cohort,
    server: Server,
    observer: &mut (dyn FnMut(usize, &[LayerUpdate]) -> Result<()> + Send),
) -> Result<RunLog> {
    config.validate()?;
    let mut server = server;
    in_pool(config.workers, || {
        let mut global = cohort.initial.clone();
        let mut records = Vec::with_capacity(config.rounds);
        let mut timings = Vec::with_capacity(config.rounds);
        for t in 1..=config.rounds {
            let out = run_round(config, &global, cohort, &mut server, t)?;
            observer(t, &out.updates)?;
            global = out.global;
            records.push(out.record);
            timings.push(out.timings);
        }
        let final_accuracy = records.last().map_or(0.0, |r| r.global_accuracy);
        Ok(RunLog {
            records,
            timings,
            standalone: cohort.standalone.clone(),
            final_accuracy,
            free_rider: cohort.free_rider,
        })
    })?
}

pub fn run_federation(config: &FederationConfig, cohort: &Cohort) -> Result<RunLog> {
    let server = Server::new(config, cohort.shard_sizes())?;
    run_federation_observed(config, cohort, server, &mut |_, _| Ok(()))
}

/// Prepares the cohort from `config` and runs every round.
pub fn run_experiment(config: &FederationConfig) -> Result<RunLog> {
    let cohort = prepare_cohort(config)?;
    run_federation(config, &cohort)
}
