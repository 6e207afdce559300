//! Central finite differences against the tape's adjoints.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::Result;
use crate::model::{AdaptationPolicy, AimModel};
use crate::params::{Forward, ParamStore, Trainable};
use crate::rng::{derive_seed, seeded_rng, Rng};
use crate::tensor::Tensor;
use crate::vit::VitConfig;

/// Location of one checked coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub coordinate: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<CoordinateCheck>,
    pub passed: bool,
}

/// Denominator floor so coordinates whose true gradient is ~0 are judged on
/// absolute error instead of amplified roundoff.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Picks `count` coordinates, spread round-robin over `names` so every listed
/// parameter is represented.
pub fn sample_coordinates(
    params: &ParamStore<f64>,
    names: &[String],
    count: usize,
    rng: &mut Rng,
) -> Vec<Coordinate> {
    let names: Vec<&String> = names.iter().filter(|n| params.contains(n)).collect();
    if names.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|i| {
            let name = names[i % names.len()];
            let len = params.get(name).unwrap().len();
            Coordinate {
                name: name.clone(),
                index: rng.gen_range(0..len),
            }
        })
        .collect()
}

/// Compares `analytic` gradients with `(f(θ+h) − f(θ−h)) / 2h` at each
/// coordinate. Failures are reported, never raised.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    coordinates: &[Coordinate],
    mut f: F,
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let mut probe = params.clone();
    let mut worst: Option<CoordinateCheck> = None;
    let mut max_rel: f64 = 0.0;
    for c in coordinates {
        let Some(t) = probe.get_mut(&c.name) else { continue };
        let original = t.data()[c.index];
        t.data_mut()[c.index] = original + h;
        let plus = f(&probe);
        probe.get_mut(&c.name).unwrap().data_mut()[c.index] = original - h;
        let minus = f(&probe);
        probe.get_mut(&c.name).unwrap().data_mut()[c.index] = original;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(&c.name).map(|g| g[c.index]).unwrap_or(0.0);
        let rel = relative_error(a, numeric);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some(CoordinateCheck {
                coordinate: c.clone(),
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    GradCheckReport {
        checked: coordinates.len(),
        tolerance: tol,
        max_rel_error: max_rel,
        passed: max_rel <= tol,
        worst,
    }
}

/// Settings for a whole-model check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub batch: usize,
    /// Skews one parameter's analytic gradient so the check must fail.
    pub corrupt: bool,
}

impl Default for ModelCheck {
    fn default() -> Self {
        ModelCheck {
            coordinates: 240,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            batch: 2,
            corrupt: false,
        }
    }
}

/// Model with every parameter moved off its initial value, so zero-initialized
/// up-projections and unit norm scales do not hide gradient paths.
pub fn perturbed_model(config: &VitConfig, policy: &AdaptationPolicy, seed: u64) -> Result<AimModel<f64>> {
    let mut rng = seeded_rng(seed);
    let mut model = AimModel::<f64>::init(config, policy, &mut rng)?;
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    Ok(model)
}

/// Random clips and labels matching `config`.
pub fn random_clips(config: &VitConfig, batch: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let shape = [batch, config.frames, config.channels, config.image_size, config.image_size];
    let video = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let labels = (0..batch).map(|i| i % config.num_classes).collect();
    (video, labels)
}

/// Cross-entropy of `params` on a fixed batch.
pub fn model_loss(model: &AimModel<f64>, params: &ParamStore<f64>, video: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut ctx = Forward::new(params, Trainable::Nothing);
    let logits = model.forward(&mut ctx, video)?;
    let loss = ctx.graph.cross_entropy(logits, labels, 0.0)?;
    ctx.graph.value(loss).item()
}

/// Adjoints of the cross-entropy for every parameter.
pub fn model_gradients(
    model: &AimModel<f64>,
    video: &Tensor<f64>,
    labels: &[usize],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut ctx = Forward::new(&model.params, Trainable::Everything);
    let logits = model.forward(&mut ctx, video)?;
    let loss = ctx.graph.cross_entropy(logits, labels, 0.0)?;
    ctx.graph.backward(loss)?;
    Ok(ctx.take_grads())
}

/// Finite-difference check of every parameter family of an adapted model in
/// double precision.
pub fn check_model(config: &VitConfig, policy: &AdaptationPolicy, opts: &ModelCheck) -> Result<GradCheckReport> {
    let model = perturbed_model(config, policy, opts.seed)?;
    let (video, labels) = random_clips(config, opts.batch, derive_seed(opts.seed, 1));
    let mut grads = model_gradients(&model, &video, &labels)?;
    if opts.corrupt {
        if let Some(g) = grads.values_mut().next() {
            for v in g.iter_mut() {
                *v = *v * 1.5 + 1e-3;
            }
        }
    }
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let coords = sample_coordinates(
        &model.params,
        &names,
        opts.coordinates,
        &mut seeded_rng(derive_seed(opts.seed, 2)),
    );
    let mut failure = None;
    let report = finite_diff_check(
        &model.params,
        &grads,
        &coords,
        |p| match model_loss(&model, p, &video, &labels) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                f64::NAN
            }
        },
        opts.step,
        opts.tolerance,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
