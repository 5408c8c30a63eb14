#![allow(dead_code)]

use std::sync::Arc;

use mimic_sim::aggregation::Algorithm;
use mimic_sim::data::{ClientDataset, Dataset};
use mimic_sim::objectives::Objective;
use mimic_sim::{Federation, LocalConfig, ParamVector, RngContract};

pub fn client(id: usize, dim: usize, rows: Vec<(f64, Vec<f64>)>) -> Arc<ClientDataset> {
    Arc::new(ClientDataset::new(id, Dataset::from_rows(dim, rows).unwrap()).unwrap())
}

/// Quadratic client on the given points.
pub fn quad(id: usize, points: &[Vec<f64>]) -> Objective {
    let dim = points[0].len();
    Objective::quadratic(client(id, dim, points.iter().map(|p| (0.0, p.clone())).collect()))
}

/// One-dimensional quadratic client on scalar points.
pub fn quad1(id: usize, points: &[f64]) -> Objective {
    quad(id, &points.iter().map(|&p| vec![p]).collect::<Vec<_>>())
}

/// Quadratic clients whose data are exactly `means ± 1` along every axis.
pub fn quad_means(means: &[Vec<f64>]) -> Vec<Objective> {
    means
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let plus: Vec<f64> = m.iter().map(|x| x + 1.0).collect();
            let minus: Vec<f64> = m.iter().map(|x| x - 1.0).collect();
            quad(i, &[plus, minus])
        })
        .collect()
}

pub fn pv(v: &[f64]) -> ParamVector {
    ParamVector::from_vec(v.to_vec())
}

/// Full-batch, single-step federation: every upload is the exact client gradient.
pub fn exact_federation(objectives: Vec<Objective>, w0: ParamVector, algorithm: Algorithm) -> Federation {
    let batch = objectives.iter().map(Objective::num_samples).max().unwrap();
    Federation::new(objectives, w0, algorithm, LocalConfig::new(1, 0.01, batch), RngContract::new(7)).unwrap()
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}
