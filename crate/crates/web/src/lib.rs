//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string with the data and a rendered SVG chart; errors become JS strings.
//!
//! The `*_json` functions hold the logic and are what native tests call.

use drmea::autodiff::Tape;
use drmea::bound::recommend_dprime;
use drmea::data::{gen_rotated_gaussians, rng_from_seed, GenParams};
use drmea::losses;
use drmea::numerics::Matrix;
use drmea::svg::{LineChart, Series};
use drmea::trainer::{self, Ablation, RunConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn check_range(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), String> {
    if v.is_finite() && (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} must lie in [{lo}, {hi}], got {v}"))
    }
}

#[derive(Serialize)]
pub struct ErrorIndexStudy {
    pub recommended: usize,
    pub batch_size: usize,
    /// `(d', mean e(d'))`; infinite values are reported as `null`.
    pub curve: Vec<(usize, Option<f64>)>,
    pub svg: String,
}

/// Two Gaussian domains whose variances fall linearly from 2 to 1; the
/// target turns the leading quarter of the axes by 30° into the trailing
/// ones.
fn gaussian_domains(dim: usize, n: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = rng_from_seed(seed);
    let sd: Vec<f64> = (0..dim).map(|i| (2.0 - i as f64 / dim as f64).sqrt()).collect();
    let source = Matrix::from_fn(dim, n, |i, _| sd[i] * normal(&mut rng));
    let raw = Matrix::from_fn(dim, n, |i, _| sd[i] * normal(&mut rng));
    let (cos, sin) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
    let half = dim / 2;
    let mut target = raw.clone();
    for j in 0..n {
        for i in 0..dim / 4 {
            let (a, b) = (raw[(i, j)], raw[(i + half, j)]);
            target[(i, j)] = cos * a - sin * b;
            target[(i + half, j)] = sin * a + cos * b;
        }
    }
    (source, target)
}

pub fn error_index_study_json(dim: usize, batch_size: usize, trials: usize, seed: u64) -> Result<String, String> {
    check_range("dim", dim as f64, 4.0, 256.0)?;
    check_range("batch size", batch_size as f64, 3.0, 128.0)?;
    check_range("trials", trials as f64, 1.0, 100.0)?;
    let (fs, ft) = gaussian_domains(dim, (8 * batch_size).max(400), seed);
    let rec = recommend_dprime(&fs, &ft, batch_size, trials, seed).map_err(|e| e.to_string())?;
    let points: Vec<(f64, f64)> = rec
        .curve
        .iter()
        .map(|p| (p.d_prime as f64, p.mean_error_index.log10()))
        .collect();
    let mut chart = LineChart::new("Mean error index over random batches", "d'", "log10 mean e(d')")
        .with_series(Series::new("e(d')", points));
    chart.markers.push(((batch_size - 1) as f64, "b_s - 1".into()));
    to_json(&ErrorIndexStudy {
        recommended: rec.d_prime,
        batch_size,
        curve: rec
            .curve
            .iter()
            .map(|p| (p.d_prime, p.mean_error_index.is_finite().then_some(p.mean_error_index)))
            .collect(),
        svg: chart.render(),
    })
}

#[derive(Serialize)]
pub struct Geometry {
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Lowest attainable value, `-1/(c-1)`.
    pub optimum: f64,
    /// Final class means scaled to unit length, `[x, y]` each.
    pub directions: Vec<[f64; 2]>,
    pub svg: String,
}

/// Gradient descent on `classes` free 2-D class means under the inter-class
/// loss with the anchor at the origin.
pub fn inter_class_geometry_json(classes: usize, steps: usize, lr: f64, seed: u64) -> Result<String, String> {
    check_range("classes", classes as f64, 2.0, 8.0)?;
    check_range("steps", steps as f64, 1.0, 20000.0)?;
    check_range("learning rate", lr, 1e-6, 10.0)?;
    let mut rng = rng_from_seed(seed);
    let mut means = Matrix::from_fn(2, classes, |_, _| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..classes).collect();
    let origin = [0.0, 0.0];
    let mut losses_seen = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let x = tape.leaf(means.clone());
        let loss =
            losses::inter_class_loss(&mut tape, x, &labels, classes, &origin, 1e-12).map_err(|e| e.to_string())?;
        losses_seen.push(tape.scalar(loss));
        let g = tape.backward(loss).map_err(|e| e.to_string())?;
        let step = g.get(x).expect("leaf gradient").scale(lr);
        means = means.sub(&step).map_err(|e| e.to_string())?;
    }
    let mut tape = Tape::new();
    let x = tape.leaf(means.clone());
    let loss = losses::inter_class_loss(&mut tape, x, &labels, classes, &origin, 1e-12).map_err(|e| e.to_string())?;
    let final_loss = tape.scalar(loss);
    let directions: Vec<[f64; 2]> = (0..classes)
        .map(|j| {
            let (a, b) = (means[(0, j)], means[(1, j)]);
            let r = a.hypot(b).max(1e-12);
            [a / r, b / r]
        })
        .collect();
    let chart = LineChart::new("Inter-class loss under gradient descent", "step", "loss")
        .with_series(Series::new(
            "loss",
            losses_seen.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
        ))
        .with_series(Series {
            dashed: true,
            ..Series::new(
                "optimum",
                vec![
                    (0.0, -1.0 / (classes - 1) as f64),
                    ((steps - 1) as f64, -1.0 / (classes - 1) as f64),
                ],
            )
        });
    to_json(&Geometry {
        losses: losses_seen,
        final_loss,
        optimum: -1.0 / (classes - 1) as f64,
        directions,
        svg: chart.render(),
    })
}

#[derive(Serialize)]
pub struct Adaptation {
    pub epochs: usize,
    pub full: Vec<f64>,
    pub source_only: Vec<f64>,
    pub svg: String,
}

/// Trains the full objective and the source-only baseline on a rotated
/// three-class task and returns both target-accuracy curves.
pub fn adaptation_run_json(rotation_degrees: f64, epochs: usize, seed: u64) -> Result<String, String> {
    check_range("rotation", rotation_degrees, -180.0, 180.0)?;
    check_range("epochs", epochs as f64, 1.0, 100.0)?;
    let pair = gen_rotated_gaussians(&GenParams {
        rotation_degrees,
        n_per_class_source: 200,
        n_per_class_target: 200,
        seed,
        ..GenParams::default()
    })
    .map_err(|e| e.to_string())?;
    let curve = |ablation: Ablation| -> Result<Vec<f64>, String> {
        let cfg = RunConfig {
            dims: vec![128, 64],
            epochs,
            seed,
            ablation,
            ..RunConfig::default()
        };
        let out = trainer::train(&cfg, &pair.source, &pair.target, Some(&pair.target_labels), None)
            .map_err(|e| e.to_string())?;
        Ok(out.logs.iter().map(|l| l.tgt_acc).collect())
    };
    let full = curve(Ablation::None)?;
    let source_only = curve(Ablation::SourceOnly)?;
    let series =
        |name: &str, v: &[f64]| Series::new(name, v.iter().enumerate().map(|(i, &a)| ((i + 1) as f64, a)).collect());
    let chart = LineChart::new("Target accuracy", "epoch", "accuracy")
        .with_series(series("full objective", &full))
        .with_series(series("source only", &source_only));
    to_json(&Adaptation {
        epochs,
        full,
        source_only,
        svg: chart.render(),
    })
}

#[wasm_bindgen]
pub fn error_index_study(dim: usize, batch_size: usize, trials: usize, seed: u32) -> Result<String, JsValue> {
    error_index_study_json(dim, batch_size, trials, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn inter_class_geometry(classes: usize, steps: usize, lr: f64, seed: u32) -> Result<String, JsValue> {
    inter_class_geometry_json(classes, steps, lr, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn adaptation_run(rotation_degrees: f64, epochs: usize, seed: u32) -> Result<String, JsValue> {
    adaptation_run_json(rotation_degrees, epochs, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}
