//! Browser demo: retrieve a pseudo-label for a synthetic scene, threshold it, and pick prompt points.
//!
//! Everything runs on synthetic token features so the page needs no model weights. A scene is a
//! few random ellipses; each 14×14 patch gets a feature that mixes a foreground and a background
//! prototype by the patch's foreground fraction, plus noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use ragseg_core::kmeans::{cluster, KMeansConfig};
use ragseg_core::metrics::evaluate_pair;
use ragseg_core::prompts::{extract_prompts, PromptConfig};
use ragseg_core::pseudolabel::{apply_threshold, generate, QueryGrid, Threshold};
use ragseg_core::store::{histogram, ingest, pool_mask};
use ragseg_core::{ClusteredStore, Map, Matrix, Metric};

const PATCH: usize = 14;
const DIM: usize = 16;
const TRAIN_GRID: usize = 16;
const TRAIN_SCENES: usize = 12;
const NOISE: f32 = 0.35;

/// Random ellipses rasterized at `side × side`.
fn scene_mask(rng: &mut ChaCha8Rng, side: usize) -> Map {
    let blobs = rng.random_range(1..=3);
    let s = side as f64;
    let shapes: Vec<[f64; 4]> = (0..blobs)
        .map(|_| {
            [
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.2 * s..0.8 * s),
                rng.random_range(0.08 * s..0.25 * s),
                rng.random_range(0.08 * s..0.25 * s),
            ]
        })
        .collect();
    Map::from_fn(side, side, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let inside = shapes
            .iter()
            .any(|&[cy, cx, ry, rx]| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0);
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

struct Prototypes {
    fg: Vec<f32>,
    bg: Vec<f32>,
}

impl Prototypes {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { fg: draw(), bg: draw() }
    }

    fn tokens(&self, rng: &mut ChaCha8Rng, fractions: &Map) -> Matrix {
        let mut data = Vec::with_capacity(fractions.len() * DIM);
        for &f in fractions.as_slice() {
            let f = f as f32;
            for d in 0..DIM {
                data.push(f * self.fg[d] + (1.0 - f) * self.bg[d] + rng.random_range(-NOISE..NOISE));
            }
        }
        Matrix::new(fractions.len(), DIM, data).expect("token matrix shape")
    }
}

/// A clustered store built from synthetic training scenes plus one query scene.
pub struct Scene {
    store: ClusteredStore,
    protos: Prototypes,
    rng: ChaCha8Rng,
    grid_side: usize,
    truth: Map,
    query_seed: u64,
    label: Option<Map>,
}

impl Scene {
    pub fn new(seed: u64, clusters: usize, grid_side: usize) -> Result<Self, String> {
        if grid_side == 0 || grid_side > 64 {
            return Err(format!("grid side {grid_side} not in 1..=64"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = Prototypes::new(&mut rng);
        let mut feats = Vec::with_capacity(TRAIN_SCENES);
        let mut masks = Vec::with_capacity(TRAIN_SCENES);
        for _ in 0..TRAIN_SCENES {
            let mask = scene_mask(&mut rng, TRAIN_GRID * PATCH);
            let fractions = pool_mask(&mask, TRAIN_GRID).map_err(|e| e.to_string())?;
            feats.push(protos.tokens(&mut rng, &fractions));
            masks.push(fractions.as_slice().iter().map(|&v| v as f32).collect());
        }
        let db = ingest(&feats, &masks).map_err(|e| e.to_string())?;
        let cfg = KMeansConfig::new(clusters).with_metric(Metric::L2).with_seed(seed);
        let store = cluster(&db, &cfg).map_err(|e| e.to_string())?.store;
        let truth = scene_mask(&mut rng, grid_side * PATCH);
        let query_seed = rng.random();
        Ok(Self { store, protos, rng, grid_side, truth, query_seed, label: None })
    }

    /// Draws a fresh query scene against the same store.
    pub fn next_scene(&mut self) {
        self.truth = scene_mask(&mut self.rng, self.grid_side * PATCH);
        self.query_seed = self.rng.random();
        self.label = None;
    }

    pub fn side(&self) -> usize {
        self.grid_side * PATCH
    }

    pub fn truth(&self) -> &Map {
        &self.truth
    }

    pub fn store(&self) -> &ClusteredStore {
        &self.store
    }

    /// Retrieves a pseudo-label with top-`topk` averaging, then applies `threshold`
    /// (`T0`..`T9`, `TN`, or a value in (0, 1)).
    pub fn pseudo_label(&mut self, topk: usize, threshold: &str) -> Result<&Map, String> {
        let strategy: Threshold = threshold.parse().map_err(|e: ragseg_core::Error| e.to_string())?;
        let fractions = pool_mask(&self.truth, self.grid_side).map_err(|e| e.to_string())?;
        let mut noise = ChaCha8Rng::seed_from_u64(self.query_seed);
        let tokens = self.protos.tokens(&mut noise, &fractions);
        let grid = QueryGrid::for_image_side(tokens, self.side()).map_err(|e| e.to_string())?;
        let raw = generate(&self.store, &grid, topk).map_err(|e| e.to_string())?;
        Ok(self.label.insert(apply_threshold(&raw.values, strategy)))
    }

    /// Prompt points of the last pseudo-label as JSON.
    pub fn prompts_json(&self, t_pos: f64, t_neg: f64) -> Result<String, String> {
        let label = self.label.as_ref().ok_or("no pseudo-label yet")?;
        let cfg = PromptConfig { t_pos, t_neg, ..PromptConfig::default() };
        let ps = extract_prompts(label, &cfg).map_err(|e| e.to_string())?;
        serde_json::to_string(&ps.points).map_err(|e| e.to_string())
    }

    /// S, E, weighted F and MAE of the last pseudo-label against the scene mask.
    pub fn metrics_json(&self) -> Result<String, String> {
        let label = self.label.as_ref().ok_or("no pseudo-label yet")?;
        let m = evaluate_pair("scene", label, &self.truth).map_err(|e| e.to_string())?;
        Ok(json!({
            "s_alpha": m.s_alpha,
            "e_xi": m.e_xi,
            "f_beta_w": m.f_beta_w,
            "mae": m.mae,
        })
        .to_string())
    }
}

/// Grayscale RGBA pixels of a map in [0, 1].
pub fn to_rgba(map: &Map) -> Vec<u8> {
    map.as_slice()
        .iter()
        .flat_map(|&v| {
            let g = ragseg_core::pgm::to_u8(v);
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, clusters: u32, grid_side: u32) -> Result<Demo, JsError> {
        Scene::new(seed as u64, clusters as usize, grid_side as usize)
            .map(|scene| Demo { scene })
            .map_err(|e| JsError::new(&e))
    }

    pub fn side(&self) -> u32 {
        self.scene.side() as u32
    }

    #[wasm_bindgen(js_name = nextScene)]
    pub fn next_scene(&mut self) {
        self.scene.next_scene();
    }

    #[wasm_bindgen(js_name = truthRgba)]
    pub fn truth_rgba(&self) -> Vec<u8> {
        to_rgba(self.scene.truth())
    }

    #[wasm_bindgen(js_name = pseudoLabelRgba)]
    pub fn pseudo_label_rgba(&mut self, topk: u32, threshold: &str) -> Result<Vec<u8>, JsError> {
        self.scene
            .pseudo_label(topk as usize, threshold)
            .map(to_rgba)
            .map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = promptsJson)]
    pub fn prompts_json(&self, t_pos: f64, t_neg: f64) -> Result<String, JsError> {
        self.scene.prompts_json(t_pos, t_neg).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(js_name = metricsJson)]
    pub fn metrics_json(&self) -> Result<String, JsError> {
        self.scene.metrics_json().map_err(|e| JsError::new(&e))
    }

    /// Mask-score counts over ten equal bins of [0, 1].
    pub fn histogram(&self) -> Vec<u32> {
        histogram(self.scene.store()).counts.iter().map(|&c| c as u32).collect()
    }
}
