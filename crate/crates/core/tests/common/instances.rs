//! Seeded random instances and a stage-by-stage comparison against the reference.

use calm_core::calm;
use calm_core::config::{RunConfig, TopK, Variant};
use calm_core::evalsuite::runner::run_variant;
use calm_core::feature_store::{FeatureSet, Manifest, TrainSet};
use calm_core::prototype::{self, Metric};
use calm_core::sav;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference::{self as r, Features};

pub struct Instance {
    pub fs: FeatureSet,
    pub x: Features,
    pub labels: Vec<usize>,
    pub train: TrainSet,
    pub test: Vec<usize>,
    pub num_classes: usize,
}

pub fn manifest(n: usize, k: usize, d: usize, c: usize, labels: Option<Vec<usize>>) -> Manifest {
    Manifest {
        schema_version: 1,
        model_id: "test".into(),
        num_examples: n,
        num_heads: k,
        head_dim: d,
        num_layers: 0,
        heads_per_layer: 0,
        class_names: (0..c).map(|i| format!("c{i}")).collect(),
        labels,
        example_ids: (0..n).map(|i| format!("x{i}")).collect(),
        dtype: "f32le".into(),
    }
}

/// `N <= 64`, `K <= 16`, `C <= 5`, `d <= 8`, every class in both train and test.
/// About 3% of head vectors are exactly zero.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(2..=5);
    let k = rng.gen_range(1..=16);
    let d = rng.gen_range(1..=8);
    let n = rng.gen_range(2 * c..=64);
    let mut labels: Vec<usize> = (0..n).map(|i| if i < 2 * c { i % c } else { rng.gen_range(0..c) }).collect();
    labels.shuffle(&mut rng);

    let mut in_train = vec![false; n];
    let mut seen = vec![0; c];
    for i in 0..n {
        seen[labels[i]] += 1;
        in_train[i] = match seen[labels[i]] {
            1 => true,
            2 => false,
            _ => rng.gen_bool(0.5),
        };
    }

    let mut values = Vec::with_capacity(n * k * d);
    for _ in 0..n * k {
        let zero = rng.gen_bool(0.03);
        for _ in 0..d {
            values.push(if zero { 0.0 } else { rng.gen_range(-1.0f32..1.0) });
        }
    }
    let x: Features = (0..n)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let start = (i * k + j) * d;
                    values[start..start + d].iter().map(|&v| f64::from(v)).collect()
                })
                .collect()
        })
        .collect();
    let fs = FeatureSet::new(manifest(n, k, d, c, Some(labels.clone())), values).unwrap();
    let train = TrainSet::new((0..n).filter(|&i| in_train[i]).map(|i| (i, labels[i])).collect());
    let test = (0..n).filter(|&i| !in_train[i]).collect();
    Instance {
        fs,
        x,
        labels,
        train,
        test,
        num_classes: c,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Params {
    pub variant: Variant,
    pub metric: Metric,
    pub tau_p: f64,
    pub tau_w: f64,
    pub k: usize,
}

pub fn random_params(seed: u64, num_heads: usize) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let temps = [0.001, 0.03, 0.1, 0.5, 1.0, 2.0];
    Params {
        variant: [Variant::Sav, Variant::CalmGlobal, Variant::CalmLocal][rng.gen_range(0..3)],
        metric: if rng.gen_bool(0.75) { Metric::Cosine } else { Metric::Dot },
        tau_p: temps[rng.gen_range(0..temps.len())],
        tau_w: temps[rng.gen_range(0..temps.len())],
        k: rng.gen_range(1..=num_heads),
    }
}

fn close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: length {} vs {}", got.len(), want.len()));
    }
    for (n, (a, b)) in got.iter().zip(want).enumerate() {
        if (a - b).abs() > tol {
            return Err(format!("{what}[{n}]: {a} vs reference {b}"));
        }
    }
    Ok(())
}

fn flat3(v: &[Vec<Vec<f64>>]) -> Vec<f64> {
    v.iter().flatten().flatten().copied().collect()
}

fn flat2(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Runs every stage through the library and the reference, comparing as it goes.
/// Returns the reference predictions on the test rows.
pub fn check_pipeline(inst: &Instance, p: Params) -> Result<Vec<usize>, String> {
    const TOL: f64 = 1e-12;
    let fs = &inst.fs;
    let c = inst.num_classes;
    let err = |e: calm_core::Error| e.to_string();
    let train_ys = &inst.train.labels;
    let cosine = p.metric == Metric::Cosine;

    let bank = prototype::compute_centroids(fs, &inst.train).map_err(err)?;
    let cent = r::centroids(&inst.x, &inst.train.indices, &inst.labels, c);
    close("centroids", &bank.centroids, &flat3(&cent), TOL)?;

    let s_train = prototype::similarity_scores(fs, &inst.train.indices, &bank, p.metric).map_err(err)?;
    let s_test = prototype::similarity_scores(fs, &inst.test, &bank, p.metric).map_err(err)?;
    let rs_train = r::scores(&inst.x, &inst.train.indices, &cent, cosine);
    let rs_test = r::scores(&inst.x, &inst.test, &cent, cosine);
    close("train scores", &s_train.scores, &flat3(&rs_train), TOL)?;
    close("test scores", &s_test.scores, &flat3(&rs_test), TOL)?;

    let want = if p.variant == Variant::Sav {
        let acc = sav::head_accuracy(&s_train, train_ys).map_err(err)?;
        let racc = r::head_accuracy(&rs_train, train_ys);
        close("head accuracy", &acc, &racc, 0.0)?;
        let ranking = sav::select_topk_heads(&acc, p.k).map_err(err)?;
        let heads = r::top_k(&racc, p.k);
        if ranking.selected != heads {
            return Err(format!("selected heads {:?} vs reference {heads:?}", ranking.selected));
        }
        let got = sav::majority_vote_predict(&s_test, &ranking).map_err(err)?.predictions;
        let want = r::vote(&rs_test, &heads, c);
        if got != want {
            return Err(format!("sav predictions {got:?} vs reference {want:?}"));
        }
        want
    } else {
        let post_train = prototype::head_posteriors(&s_train, p.tau_p).map_err(err)?;
        let post_test = prototype::head_posteriors(&s_test, p.tau_p).map_err(err)?;
        let rp_train = r::posteriors(&rs_train, p.tau_p);
        let rp_test = r::posteriors(&rs_test, p.tau_p);
        close("train posteriors", &post_train.values, &flat3(&rp_train), TOL)?;
        close("test posteriors", &post_test.values, &flat3(&rp_test), TOL)?;

        let m = calm::compute_margins(&post_train, train_ys).map_err(err)?;
        let rm = r::margins(&rp_train, train_ys);
        close("margins", &m.values, &flat2(&rm), TOL)?;

        let (rel, rrel) = if p.variant == Variant::CalmGlobal {
            let g = r::global_reliability(&rm);
            (calm::global_reliability(&m).map_err(err)?, vec![g; c])
        } else {
            (calm::local_reliability(&m).map_err(err)?, r::local_reliability(&rm, train_ys, c))
        };
        for cl in 0..c {
            close(&format!("reliability row {cl}"), rel.row(cl), &rrel[cl], TOL)?;
        }

        let wm = calm::sparsify_and_weight(&rel, p.k, p.tau_w).map_err(err)?;
        let rw: Vec<Vec<f64>> = rrel.iter().map(|row| r::weight_row(row, p.k, p.tau_w)).collect();
        close("weights", &wm.weights, &flat2(&rw), TOL)?;

        let wp = calm::weighted_predict(&post_test, &wm).map_err(err)?;
        let ragg = r::aggregate(&rp_test, &rw);
        close("aggregate scores", &wp.scores, &flat2(&ragg), TOL)?;
        let want: Vec<usize> = ragg.iter().map(|row| r::argmax(row)).collect();
        if wp.predictions != want {
            return Err(format!("calm predictions {:?} vs reference {want:?}", wp.predictions));
        }
        want
    };

    let cfg = RunConfig {
        variant: p.variant,
        metric: p.metric,
        tau_p: p.tau_p,
        tau_w: p.tau_w,
        topk: TopK::Absolute(p.k),
        ..RunConfig::default()
    };
    let report = run_variant(fs, &inst.train, &inst.test, &cfg).map_err(err)?;
    if report.predictions.predicted != want {
        return Err(format!("run_variant predictions {:?} vs reference {want:?}", report.predictions.predicted));
    }
    let truth: Vec<usize> = inst.test.iter().map(|&i| inst.labels[i]).collect();
    let metrics = report.metrics.expect("labelled test set");
    let f1 = r::macro_f1(&want, &truth, c);
    if (metrics.macro_f1 - f1).abs() > TOL {
        return Err(format!("macro F1 {} vs reference {f1}", metrics.macro_f1));
    }
    Ok(want)
}
