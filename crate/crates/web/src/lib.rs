//! wasm-bindgen entry points behind `www/index.html`.
//!
//! Three interactive pieces: the cost table of a reference detector at a
//! chosen input size, a pruning sweep over synthetic scaling factors, and
//! a steppable sparsity-training run on the toy network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use slimdet::cfg::{LayerKind, NetworkDef};
use slimdet::prune::{build_masks, compute_global_threshold, compute_local_thresholds, propagate_masks, LayerFactors};
use slimdet::sparsity::{GammaHistogram, SparsityConfig, ToyProblem, Trainer};
use slimdet::{count_flops, fixtures, parse_cfg};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn model(name: &str) -> Result<NetworkDef, JsError> {
    let text = match name {
        "yolov3-tiny" => fixtures::YOLOV3_TINY,
        "yolov3" => fixtures::YOLOV3,
        "yolov3-spp" => fixtures::YOLOV3_SPP,
        _ => return Err(JsError::new(&format!("unknown model {name}"))),
    };
    parse_cfg(text).map_err(js)
}

fn side(input: u32) -> Option<(usize, usize)> {
    (input > 0).then_some((input as usize, input as usize))
}

/// Names accepted by the other functions.
#[wasm_bindgen]
pub fn models() -> Vec<String> {
    ["yolov3-tiny", "yolov3", "yolov3-spp"].map(String::from).to_vec()
}

/// Per-layer cost table as CSV. `input` 0 keeps the cfg's size.
#[wasm_bindgen]
pub fn cost_csv(name: &str, input: u32) -> Result<String, JsError> {
    Ok(count_flops(&model(name)?, side(input))?.to_csv())
}

/// `[params, BFLOPs]` at the given input side.
#[wasm_bindgen]
pub fn cost_totals(name: &str, input: u32) -> Result<Vec<f64>, JsError> {
    let r = count_flops(&model(name)?, side(input)).map_err(js)?;
    Ok(vec![r.total_params as f64, r.bflops()])
}

/// Synthetic `|gamma|` for every batch-normalized convolution. Larger
/// `skew` piles more mass near zero, as sparsity training would.
fn synthetic_factors(def: &NetworkDef, skew: f64, seed: u32) -> Result<Vec<LayerFactors>, JsError> {
    let shapes = slimdet::infer_shapes(def, None).map_err(js)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let power = 1.0 + 8.0 * skew.clamp(0.0, 1.0);
    Ok(def
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.conv().is_some_and(|c| c.batch_normalize))
        .map(|(i, _)| LayerFactors {
            layer: i,
            values: (0..shapes.layers[i].c)
                .map(|_| rng.gen_range(1e-4f64..1.0).powf(power) as f32)
                .collect(),
        })
        .collect())
}

/// Network shape after pruning with synthetic factors, without weights.
fn pruned_shape(def: &NetworkDef, factors: &[LayerFactors], ratio: f64, local: f64) -> Result<NetworkDef, JsError> {
    let pooled: Vec<f32> = factors.iter().flat_map(|f| f.values.iter().copied()).collect();
    let global = compute_global_threshold(&pooled, ratio).map_err(js)?;
    let locals = compute_local_thresholds(factors, local).map_err(js)?;
    let masks = propagate_masks(def, &build_masks(def, factors, global, &locals).map_err(js)?).map_err(js)?;
    let mut out = def.clone();
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if let LayerKind::Convolutional(c) = &mut layer.kind {
            c.filters = masks.retained(i);
        }
    }
    Ok(out)
}

/// Sweeps the global ratio over `steps` evenly spaced values in [0, 0.95]
/// and returns `[ratio, params, BFLOPs]` triples, flattened.
#[wasm_bindgen]
pub fn prune_sweep(name: &str, input: u32, skew: f64, local_percentile: f64, seed: u32, steps: u32) -> Result<Vec<f64>, JsError> {
    let def = model(name)?;
    let factors = synthetic_factors(&def, skew, seed)?;
    let steps = steps.max(2);
    let mut out = Vec::with_capacity(3 * steps as usize);
    for k in 0..steps {
        let ratio = 0.95 * k as f64 / (steps - 1) as f64;
        let pruned = pruned_shape(&def, &factors, ratio, local_percentile)?;
        let r = count_flops(&pruned, side(input)).map_err(js)?;
        out.extend([ratio, r.total_params as f64, r.bflops()]);
    }
    Ok(out)
}

/// Sparsity training on the built-in toy network, one call per frame.
#[wasm_bindgen]
pub struct SparsityDemo {
    problem: ToyProblem,
    trainer: Trainer,
}

#[wasm_bindgen]
impl SparsityDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(alpha: f64, learning_rate: f64, seed: u32) -> Result<SparsityDemo, JsError> {
        let problem = ToyProblem::new(seed as u64);
        let config = SparsityConfig {
            alpha,
            learning_rate,
            seed: seed as u64,
            ..SparsityConfig::default()
        };
        let trainer = Trainer::new(problem.net.clone(), config).map_err(js)?;
        Ok(SparsityDemo { problem, trainer })
    }

    /// Runs `n` steps and returns the latest total loss.
    pub fn step(&mut self, n: u32) -> Result<f64, JsError> {
        let mut total = f64::NAN;
        for _ in 0..n {
            total = self.trainer.step(&self.problem.batch).map_err(js)?.total;
        }
        Ok(total)
    }

    pub fn steps(&self) -> usize {
        self.trainer.history.len()
    }

    /// Total loss after every step so far.
    pub fn losses(&self) -> Vec<f64> {
        self.trainer.history.iter().map(|r| r.loss.total).collect()
    }

    /// `|gamma|` counts in `bins` equal bins over [0, `max`].
    pub fn histogram(&self, bins: usize, max: f64) -> Result<Vec<f64>, JsError> {
        let h = self.histogram_of(bins, 0.01, max)?;
        Ok(h.counts.iter().map(|&c| c as f64).collect())
    }

    /// Share of `|gamma|` below `probe`.
    pub fn fraction_below(&self, probe: f64) -> Result<f64, JsError> {
        Ok(self.histogram_of(1, probe, f64::INFINITY)?.fraction_below)
    }
}

impl SparsityDemo {
    fn histogram_of(&self, bins: usize, probe: f64, max: f64) -> Result<GammaHistogram, JsError> {
        let values: Vec<f64> = self.trainer.net.gammas().iter().map(|g| g.abs()).collect();
        let range = max.is_finite().then_some((0.0, max));
        GammaHistogram::from_values(&values, bins, probe, range).map_err(js)
    }
}
