use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::folds::{split, stratified_folds};
use super::metrics::argmax;
use super::model::{Model, Normalizer, Runner};
use super::optim::Adam;
use crate::array::Array;
use crate::error::{Error, Result};
use crate::preprocess::Sample;

/// Mixes a run seed with a tag (fold index, purpose) into an independent seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything needed to continue training: model, optimizer moments,
/// completed epochs and their mean training losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub losses: Vec<f64>,
}

impl TrainState {
    /// Fits the normalization on `train` and initializes from `seed`.
    pub fn new(config: &TrainConfig, train: &[&Sample], seed: u64) -> Result<Self> {
        let normalizer = Normalizer::fit(train.iter().copied())?;
        let mut model = Model::init(config, normalizer, seed)?;
        // the run is defined by its f32 projection so that a reloaded
        // checkpoint continues bit-exactly
        model.project_f32();
        let adam = Adam::new(config.adam(), &model.params);
        Ok(TrainState {
            model,
            adam,
            epoch: 0,
            losses: Vec::new(),
        })
    }

    /// Seed of the run (the one the model was initialized from).
    fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 << 32 | epoch as u64))
    }

    /// Runs epochs until `epochs` are complete, calling `on_epoch` after
    /// each one. Memory restarts from the initial state every epoch and the
    /// training order is reshuffled from `(seed, epoch)`.
    pub fn train_until(
        &mut self,
        train: &[&Sample],
        seed: u64,
        epochs: usize,
        on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let batch = self.model.config.batch;
        let mut runner = Runner::new();
        while self.epoch < epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut Self::shuffle_rng(seed, self.epoch));
            let mut state = self.model.initial_state.clone();
            let mut total = 0.0;
            for (b, chunk) in order.chunks(batch).enumerate() {
                let samples: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
                let (out, grads) = runner.run(&self.model, &samples, state.as_ref(), true)?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged(format!(
                        "epoch {} batch {b}: loss is {}",
                        self.epoch + 1,
                        out.loss
                    )));
                }
                total += out.loss * chunk.len() as f64;
                let grads = grads.expect("gradients requested");
                self.adam.step(&mut self.model.params, &grads)?;
                // gradients stop at the batch boundary; the state carries on
                state = out.state;
            }
            self.model.project_f32();
            self.adam.project_f32();
            self.epoch += 1;
            let mean = total / train.len() as f64;
            self.losses.push(mean);
            log::info!(
                "{} epoch {}/{epochs}: loss {mean:.5} ({:.1}s)",
                self.model.kind(),
                self.epoch,
                started.elapsed().as_secs_f64()
            );
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Trains a fresh model on `train` for the configured number of epochs.
pub fn train_fold(config: &TrainConfig, train: &[&Sample], seed: u64) -> Result<TrainState> {
    let mut state = TrainState::new(config, train, seed)?;
    state.train_until(train, seed, config.epochs(), &mut |_| Ok(()))?;
    Ok(state)
}

/// Per-sample outputs of a model pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `n × 7`.
    pub logits: Array,
    /// `n × k` classification features (memory output, or the top encoder
    /// state for the baseline).
    pub embeddings: Array,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
    /// Mean cross-entropy.
    pub loss: f64,
}

/// Evaluates `samples` in the given order, memory starting from the model's
/// initial state and persisting across samples.
pub fn predict(model: &Model, samples: &[&Sample]) -> Result<Predictions> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let mut runner = Runner::new();
    let mut state = model.initial_state.clone();
    let (k, c) = (model.config.k, crate::CLASSES);
    let mut logits = Vec::with_capacity(samples.len() * c);
    let mut embeddings = Vec::with_capacity(samples.len() * k);
    let mut total = 0.0;
    for chunk in samples.chunks(model.config.batch) {
        let (out, _) = runner.run(model, chunk, state.as_ref(), false)?;
        total += out.loss * chunk.len() as f64;
        logits.extend_from_slice(out.logits.data());
        embeddings.extend_from_slice(out.embeddings.data());
        state = out.state;
    }
    let logits = Array::matrix(samples.len(), c, logits)?;
    let predicted = (0..samples.len()).map(|i| argmax(logits.row_slice(i))).collect();
    Ok(Predictions {
        embeddings: Array::matrix(samples.len(), k, embeddings)?,
        logits,
        predicted,
        labels: samples.iter().map(|s| s.label).collect(),
        loss: total / samples.len() as f64,
    })
}

/// Outcome of one cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub state: TrainState,
    /// Test-set indices into the full sample list, in evaluation order.
    pub test: Vec<usize>,
    pub predictions: Predictions,
}

/// Seed used to initialize and shuffle fold `fold`.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, fold as u64)
}

/// Train and test indices of `fold`; the test part is shuffled from the
/// run seed so evaluation order is reproducible.
pub fn fold_split(samples: &[Sample], config: &TrainConfig, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= config.folds {
        return Err(Error::invalid(format!("fold {fold} out of range 0..{}", config.folds)));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let assignment = stratified_folds(&labels, config.folds, config.seed)?;
    let (train, mut test) = split(&assignment, fold);
    test.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2 << 32 | fold as u64)));
    Ok((train, test))
}

/// Trains and evaluates one fold.
pub fn run_fold(config: &TrainConfig, samples: &[Sample], fold: usize) -> Result<FoldOutcome> {
    run_fold_from(config, samples, fold, None, &mut |_| Ok(()))
}

/// Trains one fold, continuing from `resume` when given, then evaluates it
/// on the fold's test part. `on_epoch` runs after every completed epoch.
pub fn run_fold_from(
    config: &TrainConfig,
    samples: &[Sample],
    fold: usize,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<FoldOutcome> {
    let (train, test) = fold_split(samples, config, fold)?;
    let train_refs: Vec<&Sample> = train.iter().map(|&i| &samples[i]).collect();
    let seed = fold_seed(config.seed, fold);
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(config, &train_refs, seed)?,
    };
    state.train_until(&train_refs, seed, config.epochs(), on_epoch)?;
    let test_refs: Vec<&Sample> = test.iter().map(|&i| &samples[i]).collect();
    let predictions = predict(&state.model, &test_refs)?;
    Ok(FoldOutcome {
        fold,
        state,
        test,
        predictions,
    })
}

/// Runs every fold; folds are spread over the available cores.
pub fn cross_validate(config: &TrainConfig, samples: &[Sample]) -> Result<Vec<FoldOutcome>> {
    config.validate()?;
    let folds: Vec<usize> = (0..config.folds).collect();
    map_folds(&folds, &|f| run_fold(config, samples, f))
}

/// Applies `job` to every fold in `folds` on up to one worker thread per
/// core. Results keep the order of `folds`; the first error wins.
pub fn map_folds<T: Send>(folds: &[usize], job: &(dyn Fn(usize) -> Result<T> + Sync)) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(folds.len());
    if workers <= 1 {
        return folds.iter().map(|&f| job(f)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new(folds.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= folds.len() {
                    break;
                }
                let r = job(folds[i]);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::ModelKind;
    use crate::train::metrics::accuracy;
    use crate::train::testkit::{tiny, toy};

    #[test]
    fn separable_toy_is_learned() {
        let samples = toy(0.0, 1);
        let refs: Vec<&Sample> = samples.iter().collect();
        for kind in ModelKind::ALL {
            let config = TrainConfig { k: 16, ..tiny(kind, 10) };
            let state = train_fold(&config, &refs, 3).unwrap();
            let p = predict(&state.model, &refs).unwrap();
            let acc = accuracy(&p.predicted, &p.labels);
            assert!(acc >= 0.99, "{kind}: accuracy {acc}, losses {:?}", state.losses);
            assert!(state.losses.last() < state.losses.first(), "{kind}: {:?}", state.losses);
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let samples = toy(0.5, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let config = TrainConfig { lr: 0.0, ..tiny(ModelKind::PlasticNmn, 2) };
        let fresh = TrainState::new(&config, &refs, 4).unwrap();
        let trained = train_fold(&config, &refs, 4).unwrap();
        for (name, a) in &fresh.model.params {
            let b = &trained.model.params[name];
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy(0.5, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let a = train_fold(&tiny(ModelKind::PlasticNmn, 2), &refs, 4).unwrap();
        let b = train_fold(&tiny(ModelKind::PlasticNmn, 2), &refs, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let samples = toy(0.5, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let config = tiny(ModelKind::NmnFixed, 3);
        let full = train_fold(&config, &refs, 6).unwrap();
        let mut partial = TrainState::new(&config, &refs, 6).unwrap();
        partial.train_until(&refs, 6, 1, &mut |_| Ok(())).unwrap();
        let mut resumed = partial.clone();
        resumed.train_until(&refs, 6, 3, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let samples = toy(0.5, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let config = tiny(ModelKind::LstmBaseline, 2);
        let mut state = TrainState::new(&config, &refs, 1).unwrap();
        state.model.params.get_mut("readout.b").unwrap().data_mut()[0] = f64::INFINITY;
        let err = state.train_until(&refs, 1, 2, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
        assert!(err.to_string().contains("epoch 1"));
    }

    #[test]
    fn cross_validation_covers_every_sample_once() {
        let samples = toy(0.5, 3);
        let config = TrainConfig { folds: 3, ..tiny(ModelKind::LstmBaseline, 1) };
        let outcomes = cross_validate(&config, &samples).unwrap();
        let mut seen = vec![0; samples.len()];
        for o in &outcomes {
            for &i in &o.test {
                seen[i] += 1;
            }
            assert_eq!(o.predictions.predicted.len(), o.test.len());
        }
        assert!(seen.iter().all(|&n| n == 1));
        assert!(fold_split(&samples, &config, 3).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|t| derive_seed(7, t)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
