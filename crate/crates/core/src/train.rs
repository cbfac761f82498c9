//! Triplet training loop with per-epoch validation and best-epoch selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{loss_graph, LossBreakdown, Triplet};
use crate::mesh::Mesh;
use crate::model::DhbrModel;
use crate::nn::{AdamState, ParamStore};
use crate::synth::Splits;

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub meshes: &'a [Mesh],
    pub splits: &'a Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over the epoch's triplets.
    pub loss: LossBreakdown,
    pub val_e_avd: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_e_avd: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation E_avd (the last
    /// epoch when there is no validation split).
    pub best: DhbrModel,
    pub final_params: ParamStore,
    pub report: TrainReport,
}

fn diverged(epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(reason) => Error::Diverged { epoch, step, reason },
        other => other,
    }
}

pub fn train(
    config: &RunConfig,
    mut model: DhbrModel,
    data: TrainData,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config() != &config.model {
        return Err(Error::InvalidArgument("model was built from a different model config".into()));
    }
    if let Some(k) = config.k {
        if k != model.k() {
            return Err(Error::InvalidArgument(format!("config k = {k}, skeleton has {}", model.k())));
        }
    }
    let n = data.meshes.len();
    let s = data.splits;
    if let Some(&bad) = s.train.iter().chain(&s.val).chain(&s.test).find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("split index {bad} ≥ {n} meshes")));
    }
    for x in data.meshes {
        model.check_topology(x)?;
    }
    let steps = s.train.len() / config.batch_size;
    if steps == 0 || s.train.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "{} training meshes cannot fill one step of {} triplets",
            s.train.len(),
            config.batch_size
        )));
    }
    let val: Vec<&Mesh> = s.val.iter().map(|&i| &data.meshes[i]).collect();

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(model.params(), config.lr);
    let mut grads = model.params().zero_grads();
    let mut best: Option<(usize, Option<f64>, ParamStore)> = None;
    let mut records = Vec::with_capacity(config.epochs);
    let mut order = s.train.clone();

    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        adam.lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for step in 0..steps {
            grads.fill_zero();
            for b in 0..config.batch_size {
                // Every training mesh anchors one triplet per epoch; its
                // partners are two other training meshes.
                let at = step * config.batch_size + b;
                let t = order.len();
                let j = (at + rng.gen_range(1..t)) % t;
                let (lo, hi) = (at.min(j), at.max(j));
                let mut k = rng.gen_range(0..t - 2);
                if k >= lo {
                    k += 1;
                }
                if k >= hi {
                    k += 1;
                }
                let triplet = Triplet {
                    x1: &data.meshes[order[at]],
                    x2: &data.meshes[order[j]],
                    x3: &data.meshes[order[k]],
                };
                let lg = loss_graph(&model, triplet, &config.loss, rng.gen(), None).map_err(diverged(epoch, step))?;
                lg.graph.backward(lg.total, &mut grads)?;
                let l = lg.breakdown;
                sum.vertex += l.vertex;
                sum.edge += l.edge;
                sum.reconstruction += l.reconstruction;
                sum.cross += l.cross;
                sum.self_consistency += l.self_consistency;
                sum.total += l.total;
            }
            if config.batch_size > 1 {
                grads.scale(1.0 / config.batch_size as f64);
            }
            adam.step(model.params_mut(), &grads).map_err(diverged(epoch, step))?;
        }
        let count = (steps * config.batch_size) as f64;
        let loss = LossBreakdown {
            vertex: sum.vertex / count,
            edge: sum.edge / count,
            reconstruction: sum.reconstruction / count,
            cross: sum.cross / count,
            self_consistency: sum.self_consistency / count,
            total: sum.total / count,
        };
        let val_e_avd = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val)?.mean_e_avd)
        };
        let improved = match (&best, val_e_avd) {
            (None, _) | (_, None) => true,
            (Some((_, Some(b), _)), Some(v)) => v < *b,
            (Some((_, None, _)), Some(_)) => true,
        };
        if improved {
            best = Some((epoch, val_e_avd, model.params().clone()));
        }
        let record = EpochRecord {
            epoch,
            lr: adam.lr,
            steps,
            loss,
            val_e_avd,
            seconds: t0.elapsed().as_secs_f64(),
        };
        progress(&record);
        records.push(record);
    }

    let final_params = model.params().clone();
    let (best_epoch, best_val_e_avd, best_params) = best.expect("at least one epoch");
    *model.params_mut() = best_params;
    Ok(TrainOutcome {
        best: model,
        final_params,
        report: TrainReport {
            epochs: records,
            best_epoch,
            best_val_e_avd,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Checkpoint;
    use crate::model::tests::small_model;
    use crate::synth::{sample_dataset, BodyModel, GeneratorSpec};

    fn tiny_run(seed: u64) -> (TrainOutcome, RunConfig) {
        let (m, _) = small_model();
        let body = BodyModel::new(GeneratorSpec::default()).unwrap();
        let data = sample_dataset(8, 2, &body).unwrap();
        let cfg = RunConfig {
            epochs: 2,
            seed,
            ..RunConfig::default()
        };
        let out = train(
            &cfg,
            m.clone(),
            TrainData {
                meshes: &data.meshes,
                splits: &data.splits,
            },
            |_| {},
        )
        .unwrap();
        (out, cfg)
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (a, cfg) = tiny_run(3);
        let (b, _) = tiny_run(3);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(
            Checkpoint::from_model(&a.best, &cfg).to_bytes(),
            Checkpoint::from_model(&b.best, &cfg).to_bytes()
        );
        let (c, _) = tiny_run(4);
        assert_ne!(a.final_params, c.final_params);
        assert_eq!(a.report.epochs.len(), 2);
        for r in &a.report.epochs {
            assert_eq!(r.lr, cfg.lr_at(r.epoch));
            assert_eq!(r.steps, crate::synth::make_splits(8, 2).train.len());
            assert!(r.loss.total.is_finite());
        }
    }

    #[test]
    fn nan_data_aborts_with_position() {
        let (m, meshes) = small_model();
        let mut bad = meshes.clone();
        bad[1].vertices[5][0] = f64::NAN;
        let splits = Splits {
            train: vec![0, 1, 2],
            val: vec![],
            test: vec![],
        };
        let err = train(
            &RunConfig {
                epochs: 1,
                ..RunConfig::default()
            },
            m.clone(),
            TrainData {
                meshes: &bad,
                splits: &splits,
            },
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    #[test]
    fn too_few_training_meshes() {
        let (m, meshes) = small_model();
        let splits = Splits {
            train: vec![0, 1],
            val: vec![2],
            test: vec![],
        };
        let data = TrainData {
            meshes,
            splits: &splits,
        };
        assert!(train(&RunConfig::default(), m.clone(), data, |_| {}).is_err());
    }
}
