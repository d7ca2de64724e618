//! wasm-bindgen entry points for `www/index.html`. Every function returns a
//! JSON string; errors come back as `{"error": "..."}`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use fedvit::data::{generate_synthetic, SkewSpec, SyntheticSpec};
use fedvit::fed::{consistency_loss, reserve_new_test, FedConfig, Federation};
use fedvit::partition::ParamRole;
use fedvit::tensor::{Tape, Tensor};
use fedvit::vit::{ViTConfig, VisionTransformer};

fn to_json<T: Serialize>(r: fedvit::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("serializable"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[derive(Serialize)]
pub struct PartitionSummary {
    pub personalized_heads: Vec<usize>,
    pub total_params: usize,
    pub personalized_params: usize,
    pub personalized_fraction: f64,
    pub tensors: Vec<(String, Vec<usize>, &'static str)>,
}

pub fn partition_summary_impl(embed_dim: usize, heads: usize, layers: usize, ratio: f64) -> fedvit::Result<PartitionSummary> {
    let cfg = ViTConfig {
        embed_dim,
        num_heads: heads,
        num_layers: layers,
        mlp_hidden: 4 * embed_dim,
        ..ViTConfig::default()
    };
    let model = VisionTransformer::new(cfg, ratio)?;
    let store = model.init_params(0)?;
    let total = store.numel(None);
    let personal = store.numel(Some(ParamRole::Personalized));
    Ok(PartitionSummary {
        personalized_heads: (0..layers).map(|l| model.partition().personalized_heads(l)).collect(),
        total_params: total,
        personalized_params: personal,
        personalized_fraction: personal as f64 / total as f64,
        tensors: store
            .iter()
            .map(|(n, p)| {
                let role = match p.role {
                    ParamRole::Shared => "shared",
                    ParamRole::Personalized => "personalized",
                };
                (n.to_string(), p.tensor.shape().to_vec(), role)
            })
            .collect(),
    })
}

/// Per-layer personalized head counts and parameter totals.
#[wasm_bindgen]
pub fn partition_summary(embed_dim: usize, heads: usize, layers: usize, ratio: f64) -> String {
    to_json(partition_summary_impl(embed_dim, heads, layers, ratio))
}

pub fn consistency_curve_impl(seed: u64, ratio: f64, temperatures: &[f64]) -> fedvit::Result<Vec<(f64, f64)>> {
    let model = VisionTransformer::new(ViTConfig::new(8, 4, 16, 4, 2), ratio)?;
    let mut store = model.init_params(seed)?;
    // Spread the weights so the two subnets disagree visibly.
    for (i, (_, p)) in store.iter_mut().enumerate() {
        for (j, v) in p.tensor.data_mut().iter_mut().enumerate() {
            *v += 0.4 * (((i * 7919 + j * 104_729) as u64 ^ seed).wrapping_mul(2_654_435_761) % 2001) as f32 / 1000.0 - 0.4;
        }
    }
    let images = Tensor::new(
        vec![4, 8, 8, 1],
        (0..256u64).map(|k| ((k.wrapping_mul(40503) ^ seed) % 256) as f32 / 255.0).collect(),
    )?;
    temperatures
        .iter()
        .map(|&t| {
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, &store, false)?;
            let con = consistency_loss(&model, &mut tape, &vars, &images, t as f32)?;
            Ok((t, tape.value(con).item()? as f64))
        })
        .collect()
}

/// Consistency loss of a random tiny model at each temperature in `temps`.
#[wasm_bindgen]
pub fn consistency_curve(seed: u64, ratio: f64, temps: Vec<f64>) -> String {
    to_json(consistency_curve_impl(seed, ratio, &temps))
}

#[derive(Serialize)]
pub struct RoundPoint {
    pub round: usize,
    pub mean_local_auc: f64,
    pub new_auc: f64,
    pub mean_ce: f64,
    pub mean_con: f64,
}

pub fn tiny_federation_impl(seed: u64, ratio: f64, lambda: f64, rounds: usize) -> fedvit::Result<Vec<RoundPoint>> {
    let clients = 3;
    let mut spec = SyntheticSpec::new(clients, 120, 8, 2, SkewSpec::with_random_shifts(0.5, clients, 0.3, seed));
    spec.template_amplitude = 0.3;
    let mut shards = generate_synthetic(&spec)?;
    let pool = reserve_new_test(&mut shards, 0.2, seed)?;
    let cfg = FedConfig {
        num_clients: clients,
        rounds,
        local_epochs: 1,
        lr: 0.05,
        batch_size: 16,
        lambda,
        ratio,
        seed,
        ..FedConfig::default()
    };
    let mut fed = Federation::new(ViTConfig::new(8, 4, 16, 4, 2), cfg, shards, pool)?;
    Ok(fed
        .run(&mut |_| {})?
        .into_iter()
        .map(|r| RoundPoint {
            round: r.round,
            mean_local_auc: r.mean_local_auc(),
            new_auc: r.new_auc,
            mean_ce: r.ce.iter().sum::<f64>() / r.ce.len() as f64,
            mean_con: r.mean_con(),
        })
        .collect())
}

/// A three-client federation on 8x8 synthetic images; one point per round.
#[wasm_bindgen]
pub fn tiny_federation(seed: u64, ratio: f64, lambda: f64, rounds: usize) -> String {
    to_json(tiny_federation_impl(seed, ratio, lambda, rounds.clamp(1, 30)))
}
