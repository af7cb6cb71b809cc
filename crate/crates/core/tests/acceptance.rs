//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use fedspectra::analysis::{self, equal_intervals};
use fedspectra::cli::run_command;
use fedspectra::config::{DataSource, FederationConfig, Strategy};
use fedspectra::data::{self, partition_by_label_counts, Dataset, PartitionKind};
use fedspectra::federation::{self, cohort_from_shards, prepare_cohort, run_federation};
use fedspectra::fusion::{rank_adapt, update, KalmanParams, RankAdaptiveKalman};
use fedspectra::linalg::DenseMatrix;
use fedspectra::nn::{loss_and_gradient, ModelParams};
use fedspectra::rng::{stream, Purpose};
use fedspectra::scoring::{spectral_entropy, EntropyMode};
use nalgebra::DMatrix;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn blobs_config(n_clients: usize, rounds: usize, strategy: Strategy, partition: PartitionKind) -> FederationConfig {
    FederationConfig {
        n_clients,
        rounds,
        strategy,
        partition,
        ..FederationConfig::default()
    }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let took = started.elapsed();
    (took <= limit, format!("{:.1}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

/// 1. Smoothed entropy ranks clients by label count.
fn label_count_ordering() -> fedspectra::Result<Outcome> {
    let started = Instant::now();
    let mut ordered = 0usize;
    let mut total = 0usize;
    let mut per_seed = Vec::new();
    for seed in SEEDS {
        let mut config = blobs_config(3, 30, Strategy::SpectralFed, PartitionKind::OnlyLabelSkew);
        config.seed = seed;
        config.data.source = DataSource::Blobs {
            classes: 10,
            dim: 32,
            per_class: 600,
            separation: 3.0,
        };
        let ds = federation::load_dataset(&config)?;
        let (train, test) = data::holdout_split(&ds, config.data.test_fraction, seed)?;
        let shards = partition_by_label_counts(&train, &[2, 5, 10], Some(600), seed)?
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<fedspectra::Result<Vec<Dataset>>>()?;
        assert!(shards.iter().all(|s| s.len() == 600));
        let cohort = cohort_from_shards(&config, shards, test, false)?;
        let log = run_federation(&config, &cohort)?;
        let mut hits = 0;
        for r in log.records.iter().filter(|r| (10..=30).contains(&r.round)) {
            let s = r.smoothed_entropy.as_ref().expect("spectral_fed records entropy");
            if s[0] < s[1] && s[1] < s[2] {
                hits += 1;
            }
            total += 1;
        }
        ordered += hits;
        per_seed.push(hits);
    }
    let share = ordered as f64 / total as f64;
    let (fast, time) = within(Duration::from_secs(60), started);
    Ok(outcome(
        share >= 0.9 && fast,
        format!("ordered in {share:.3} of rounds 10-30 (per seed {per_seed:?} of 21), {time}"),
    ))
}

/// 2. Weights correlate with standalone accuracy under label skew.
fn label_skew_correlation() -> fedspectra::Result<Outcome> {
    let started = Instant::now();
    let mut fed = Vec::new();
    let mut fuse = Vec::new();
    let mut uniform_zero = true;
    for seed in SEEDS {
        let mut config = blobs_config(5, 50, Strategy::SpectralFed, PartitionKind::OnlyLabelSkew);
        config.seed = seed;
        let cohort = prepare_cohort(&config)?;
        for (strategy, sink) in [(Strategy::SpectralFed, &mut fed), (Strategy::SpectralFuse, &mut fuse)] {
            config.strategy = strategy;
            sink.push(run_federation(&config, &cohort)?.final_pearson());
        }
        config.strategy = Strategy::FedAvgUniform;
        let log = run_federation(&config, &cohort)?;
        uniform_zero &= log.records.iter().all(|r| r.pearson == 0.0 && r.spearman == 0.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (fast, time) = within(Duration::from_secs(120), started);
    Ok(outcome(
        mean(&fed) >= 0.8 && mean(&fuse) >= 0.8 && uniform_zero && fast,
        format!(
            "SpectralFed {:.3} {fed:.3?}, SpectralFuse {:.3} {fuse:.3?}, FedAvgUniform zero: {uniform_zero}, {time}",
            mean(&fed),
            mean(&fuse)
        ),
    ))
}

/// Shannon entropy of a spectrum normalized by its sum or by its 2-norm.
fn oracle_entropy(m: &DenseMatrix, mode: EntropyMode) -> f64 {
    let mm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let gram = &mm * mm.transpose();
    let eig = gram.clone().symmetric_eigenvalues();
    let scale = match mode {
        EntropyMode::TraceNormalized => gram.trace(),
        EntropyMode::FrobeniusNormalized => gram.norm(),
    };
    eig.iter()
        .map(|l| l / scale)
        .filter(|&p| p > 1e-300)
        .map(|p| -p * p.ln())
        .sum()
}

/// 3. Entropy agrees with an independent eigendecomposition.
fn entropy_oracle() -> fedspectra::Result<Outcome> {
    let mut rng = stream(2024, Purpose::Init, 0, 0);
    let mut worst = 0.0f64;
    let mut worst_invariance = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(2..=10);
        let d = rng.random_range(c..=32);
        let data: Vec<f64> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = DenseMatrix::new(c, d, data)?;
        for mode in [EntropyMode::TraceNormalized, EntropyMode::FrobeniusNormalized] {
            let got = spectral_entropy(&m, mode)?.value;
            worst = worst.max((got - oracle_entropy(&m, mode)).abs());

            let scaled = spectral_entropy(&m.scaled(rng.random_range(0.01..100.0)), mode)?.value;
            let flipped = spectral_entropy(&m.scaled(-1.0), mode)?.value;
            let mut perm: Vec<usize> = (0..c).collect();
            perm.reverse();
            perm.rotate_left(rng.random_range(0..c));
            let rows: Vec<Vec<f64>> = perm.iter().map(|&r| m.row(r).to_vec()).collect();
            let permuted = spectral_entropy(&DenseMatrix::from_rows(&rows)?, mode)?.value;
            for v in [scaled, flipped, permuted] {
                worst_invariance = worst_invariance.max((v - got).abs());
            }
        }
    }
    Ok(outcome(
        worst <= 1e-8 && worst_invariance <= 1e-9,
        format!("max oracle error {worst:.2e}, max invariance error {worst_invariance:.2e}"),
    ))
}

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let ties = x.iter().filter(|&&u| u == v).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (naive_ranks(a), naive_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// 4. Filter matches straight-line arithmetic and its limits.
fn kalman_correctness() -> fedspectra::Result<Outcome> {
    let params = KalmanParams::default();
    let n = 4;
    let mut filter = RankAdaptiveKalman::new(n, params)?;
    let mut x = vec![0.25; n];
    let mut p = vec![params.p0; n];
    let mut rng = stream(7, Purpose::Train, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut g: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let (ss, gs) = (s.iter().sum::<f64>(), g.iter().sum::<f64>());
        s.iter_mut().for_each(|v| *v /= ss);
        g.iter_mut().for_each(|v| *v /= gs);

        let got = filter.filter_step(&s, &g)?;
        let prior_p: Vec<f64> = p.iter().map(|v| v + params.q).collect();
        let r1 = 1.0 - naive_spearman(&x, &s) + params.epsilon;
        let r2 = 1.0 - naive_spearman(&x, &g) + params.epsilon;
        for i in 0..n {
            let post = 1.0 / (1.0 / prior_p[i] + 1.0 / r1 + 1.0 / r2);
            x[i] = post * (x[i] / prior_p[i] + s[i] / r1 + g[i] / r2);
            p[i] = post;
        }
        for i in 0..n {
            worst = worst.max((got[i] - x[i]).abs()).max((filter.variances()[i] - p[i]).abs());
        }
    }

    let (frozen, _) = update(0.3, 0.01, [0.9, 0.0], [1e9, 1e9])?;
    let freeze_ok = (frozen - 0.3).abs() <= 1e-6;

    let mut consistent = RankAdaptiveKalman::from_state(vec![0.1, 0.2, 0.3, 0.4], vec![0.05; 4], params)?;
    let prior = consistent.predict();
    consistent.filter_step(&[0.1, 0.2, 0.3, 0.4], &[0.1, 0.2, 0.3, 0.4])?;
    let shrink_ok = consistent.variances().iter().zip(&prior.p).all(|(post, pre)| post < pre);

    let ra = rank_adapt(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0], params.epsilon)?;
    let r_ok = (ra.r[0] - params.epsilon).abs() < 1e-12 && (ra.r[1] - (2.0 + params.epsilon)).abs() < 1e-12;

    Ok(outcome(
        worst <= 1e-9 && freeze_ok && shrink_ok && r_ok,
        format!("max oracle error {worst:.2e}, freeze {freeze_ok}, shrink {shrink_ok}, R limits {r_ok}"),
    ))
}

/// 5. The free-rider is flagged late in training, genuine clients rarely.
fn free_rider_detection() -> fedspectra::Result<Outcome> {
    let started = Instant::now();
    let mut tp = Vec::new();
    let mut worst_fp = 0.0f64;
    for seed in SEEDS {
        let mut config = blobs_config(5, 60, Strategy::SpectralFuse, PartitionKind::Dirichlet { alpha: 1.0 });
        config.seed = seed;
        // Desk-scale shards are tiny; more local steps per round stand in
        // for the hundreds of SGD steps a full-size local epoch takes.
        config.train.batch_size = 32;
        config.train.local_epochs = 3;
        config.free_rider = Some(fedspectra::config::FreeRiderConfig {
            client: seed as usize % 5,
            pool_size: None,
        });
        let log = federation::run_experiment(&config)?;
        let quarter = equal_intervals(config.rounds, 4)?[3];
        let rates = analysis::detection_rate(&log.records, seed as usize % 5, &[quarter], config.detection.tau)?;
        tp.push(rates[0].true_positive);
        worst_fp = worst_fp.max(rates[0].max_false_positive());
    }
    let mean_tp = tp.iter().sum::<f64>() / tp.len() as f64;
    let (fast, time) = within(Duration::from_secs(180), started);
    Ok(outcome(
        mean_tp >= 0.8 && worst_fp <= 0.2 && fast,
        format!("final-quarter TP {mean_tp:.3} {tp:.3?}, worst per-client FP {worst_fp:.3}, {time}"),
    ))
}

/// 6. Entropy weighting costs no accuracy on IID data.
fn iid_parity() -> fedspectra::Result<Outcome> {
    let mut gaps = Vec::new();
    for seed in SEEDS {
        let mut config = blobs_config(5, 50, Strategy::SpectralFed, PartitionKind::Iid);
        config.seed = seed;
        let cohort = prepare_cohort(&config)?;
        let spectral = run_federation(&config, &cohort)?.final_accuracy;
        config.strategy = Strategy::FedAvgUniform;
        let uniform = run_federation(&config, &cohort)?.final_accuracy;
        gaps.push((spectral - uniform).abs() * 100.0);
    }
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok(outcome(worst <= 2.0, format!("accuracy gaps {gaps:.2?} points")))
}

/// 7. The final layer's entropy tracks standalone accuracy best.
fn final_layer_best() -> fedspectra::Result<Outcome> {
    let mut config = blobs_config(5, 50, Strategy::SpectralFed, PartitionKind::OnlyLabelSkew);
    config.model.hidden = vec![64, 32];
    let studies = analysis::layerwise_over_seeds(&config, &SEEDS)?;
    let wins = studies.iter().filter(|s| s.best_layer() == s.per_layer.len() - 1).count();
    let detail: Vec<String> = studies.iter().map(|s| format!("{:.3?}", s.per_layer)).collect();
    Ok(outcome(wins >= 2, format!("final layer best in {wins}/3 seeds; per-layer {}", detail.join(" "))))
}

/// 8. Correlation is insensitive to Q and ε.
fn sweep_sensitivity() -> fedspectra::Result<Outcome> {
    let config = blobs_config(5, 50, Strategy::SpectralFuse, PartitionKind::OnlyLabelSkew);
    let grid = analysis::sweep(&config, &[1e-6, 1e-4, 1e-2], &[1e-4, 1e-3, 1e-2], &SEEDS)?;
    let means: Vec<f64> = grid.cells.iter().map(|c| c.mean).collect();
    Ok(outcome(
        grid.spread() <= 0.15,
        format!("spread {:.3}; cell means {means:.3?}", grid.spread()),
    ))
}

/// 9. Backpropagation agrees with central differences.
fn gradient_check() -> fedspectra::Result<Outcome> {
    let mut rng = stream(11, Purpose::Init, 0, 0);
    let params = ModelParams::init(&[4, 6, 3], &mut rng)?;
    let features: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ds = Dataset::new(DenseMatrix::new(5, 4, features)?, vec![0, 1, 2, 1, 0], 3)?;
    let batch: Vec<usize> = (0..5).collect();
    let (_, grad) = loss_and_gradient(&params, &ds, &batch)?;
    let loss = |p: &ModelParams| loss_and_gradient(p, &ds, &batch).map(|(l, _)| l);

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for k in 0..params.layers().len() {
        let layer = &params.layers()[k];
        let n_w = layer.weight.as_slice().len();
        for j in 0..n_w + layer.bias.len() {
            let nudge = |delta: f64| {
                let mut p = params.clone();
                let l = &mut p.layers_mut()[k];
                if j < n_w {
                    l.weight.as_mut_slice()[j] += delta;
                } else {
                    l.bias[j - n_w] += delta;
                }
                p
            };
            let numeric = (loss(&nudge(h))? - loss(&nudge(-h))?) / (2.0 * h);
            let analytic = if j < n_w {
                grad.weights[k].as_slice()[j]
            } else {
                grad.biases[k][j - n_w]
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    Ok(outcome(worst <= 1e-4, format!("max relative error {worst:.2e} over {coords} coordinates")))
}

/// 10. `run` output is byte-identical across repeats and worker counts.
fn determinism() -> fedspectra::Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| fedspectra::Error::io("tempdir", e))?;
    let mut config = blobs_config(4, 6, Strategy::SpectralFuse, PartitionKind::Dirichlet { alpha: 0.5 });
    config.model.hidden = vec![16];
    let mut logs = Vec::new();
    for (i, workers) in [1usize, 4, 1, 0].into_iter().enumerate() {
        config.workers = workers;
        let out = dir.path().join(format!("run{i}"));
        run_command("run", &config, &[5], &out)?;
        logs.push(std::fs::read(out.join("rounds.jsonl")).map_err(|e| fedspectra::Error::io(&out, e))?);
    }
    let identical = logs.windows(2).all(|w| w[0] == w[1]);
    Ok(outcome(
        identical && !logs[0].is_empty(),
        format!("{} runs with workers 1/4/1/0, identical: {identical}", logs.len()),
    ))
}

type Criterion = (&'static str, fn() -> fedspectra::Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 label-count entropy ordering", label_count_ordering),
        ("2 label-skew weight correlation", label_skew_correlation),
        ("3 entropy oracle equivalence", entropy_oracle),
        ("4 rank-adaptive Kalman correctness", kalman_correctness),
        ("5 free-rider detection", free_rider_detection),
        ("6 IID accuracy parity", iid_parity),
        ("7 final layer has best entropy correlation", final_layer_best),
        ("8 Q/epsilon sweep sensitivity", sweep_sensitivity),
        ("9 gradient check", gradient_check),
        ("10 determinism across worker counts", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(&format!("{o} "))) {
            continue;
        }
        let started = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {name}: {} [{:.1}s]", result.detail, started.elapsed().as_secs_f64());
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
