//! Federated simulation: local Nesterov-SGD on each client, FedAvg over the
//! shared parameters, personalized heads kept on the client.

mod aggregate;
mod loss;
mod optim;

pub use aggregate::{fedavg_aggregate, ClientUpdate};
pub use loss::{consistency_loss, local_objective, symmetric_kl, Objective};
pub use optim::{MomentumBuffers, Nesterov};

use web_time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::partition::{ParamRole, ParamStore};
use crate::seed::{self, tag};
use crate::tensor::Tape;
use crate::vit::{ViTConfig, VisionTransformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub temperature: f64,
    /// Personalization ratio `p`.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            num_clients: 6,
            rounds: 50,
            local_epochs: 3,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lambda: 1.0,
            temperature: 4.0,
            ratio: 0.6,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("num_clients", self.num_clients),
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return bad(format!("ratio must lie in [0, 1], got {}", self.ratio));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Nesterov {
        Nesterov {
            lr: self.lr as f32,
            momentum: self.momentum as f32,
            weight_decay: self.weight_decay as f32,
        }
    }
}

/// Mini-batch visiting order of a client's training set for one epoch.
/// `global_epoch` counts epochs across rounds (`round * E + e`).
pub fn batch_order(seed: u64, client_id: usize, global_epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[tag::BATCHES, client_id as u64, global_epoch as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Everything one client keeps between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub params: ParamStore,
    pub momentum: MomentumBuffers,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.shard.train.len()
    }

    /// FVT1 bytes of the shared parameters: what this client sends out.
    pub fn upload(&self) -> Result<Vec<u8>> {
        let mut shared = ParamStore::new();
        for (name, t) in self.params.extract(ParamRole::Shared) {
            shared.insert(name, t, ParamRole::Shared)?;
        }
        Ok(checkpoint::encode(&shared))
    }
}

/// Mean losses over the steps of one `local_train` call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalStats {
    pub ce: f64,
    pub con: f64,
    pub steps: usize,
}

/// `cfg.local_epochs` epochs of mini-batch training on the client's train
/// split. Epoch `e` uses batch order `batch_order(seed, id, round * E + e)`.
pub fn local_train(model: &VisionTransformer, client: &mut ClientState, cfg: &FedConfig, round: usize) -> Result<LocalStats> {
    let train = &client.shard.train;
    if train.is_empty() {
        return Err(Error::Data(format!("client {} has no training data", client.client_id)));
    }
    let opt = cfg.optimizer();
    let mut stats = LocalStats::default();
    for e in 0..cfg.local_epochs {
        let order = batch_order(cfg.seed, client.client_id, round * cfg.local_epochs + e, train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let numeric = |msg: String| Error::Numeric {
                round: round + 1,
                client: client.client_id,
                msg,
            };
            let images = train.batch(chunk);
            let labels = train.batch_labels(chunk);
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape, &client.params, true)?;
            let obj = local_objective(
                model,
                &mut tape,
                &vars,
                &images,
                &labels,
                cfg.lambda as f32,
                cfg.temperature as f32,
            )?;
            let (total, ce, con) = (
                tape.value(obj.total).item()?,
                tape.value(obj.ce).item()?,
                tape.value(obj.con).item()?,
            );
            if !total.is_finite() || !con.is_finite() {
                return Err(numeric(format!(
                    "non-finite loss (total {total}, ce {ce}, con {con}) at epoch {}",
                    e + 1
                )));
            }
            tape.backward(obj.total)?;
            client
                .momentum
                .step(&opt, &mut client.params, |name| tape.grad(vars.get(name).expect("bound")).expect("trainable"));
            if let Some((name, _)) = client.params.iter().find(|(_, p)| !p.tensor.is_finite()) {
                return Err(numeric(format!("parameter `{name}` became non-finite at epoch {}", e + 1)));
            }
            stats.ce += ce as f64;
            stats.con += con as f64;
            stats.steps += 1;
        }
    }
    stats.ce /= stats.steps as f64;
    stats.con /= stats.steps as f64;
    Ok(stats)
}

/// Moves roughly `fraction` of every client's test samples of each class
/// (never all of a class) into one pooled set for the new-test protocol.
pub fn reserve_new_test(shards: &mut [ClientShard], fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("new-test fraction must lie in [0, 1), got {fraction}")));
    }
    let mut pool: Option<Dataset> = None;
    for shard in shards.iter_mut() {
        let test = &shard.test;
        let mut rng = seed::rng(seed, &[tag::HOLDOUT, shard.client_id as u64]);
        let mut held = Vec::new();
        for c in 0..test.num_classes {
            let mut idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] == c).collect();
            if idx.len() < 2 || fraction == 0.0 {
                continue;
            }
            idx.shuffle(&mut rng);
            let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
            held.extend_from_slice(&idx[..k]);
        }
        held.sort_unstable();
        let keep: Vec<usize> = (0..test.len()).filter(|i| held.binary_search(i).is_err()).collect();
        let taken = test.subset(&held);
        pool = Some(match pool {
            Some(p) => Dataset::concat([&p, &taken]).expect("two parts"),
            None => taken,
        });
        shard.test = test.subset(&keep);
    }
    pool.ok_or_else(|| Error::Data("no clients".into()))
}

/// Metrics of one communication round (1-based `round`).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub ce: Vec<f64>,
    pub con: Vec<f64>,
    pub local_auc: Vec<f64>,
    pub new_auc: f64,
    pub wall_time_s: f64,
}

impl RoundReport {
    pub fn mean_local_auc(&self) -> f64 {
        mean(&self.local_auc)
    }

    pub fn mean_con(&self) -> f64 {
        mean(&self.con)
    }

    pub fn rows(&self) -> Vec<metrics::MetricRow> {
        let mut rows = Vec::with_capacity(3 * self.ce.len() + 1);
        for j in 0..self.ce.len() {
            for (split, metric, value) in [
                ("train", "ce", self.ce[j]),
                ("train", "con", self.con[j]),
                ("local", "auc", self.local_auc[j]),
            ] {
                rows.push(metrics::MetricRow {
                    round: self.round,
                    client: Some(j),
                    split,
                    metric,
                    value,
                });
            }
        }
        rows.push(metrics::MetricRow {
            round: self.round,
            client: None,
            split: "new",
            metric: "auc",
            value: self.new_auc,
        });
        rows
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// One client-to-server transfer, as seen on the wire.
#[derive(Clone, Copy, Debug)]
pub struct Upload<'a> {
    pub round: usize,
    pub client_id: usize,
    pub bytes: &'a [u8],
}

/// A federation in progress: the model, the clients and the new-test pool.
pub struct Federation {
    model: VisionTransformer,
    cfg: FedConfig,
    clients: Vec<ClientState>,
    held_out: Dataset,
    rounds_done: usize,
    threads: usize,
}

impl Federation {
    /// Every client starts from the same `cfg.seed` initialization, so
    /// personalized heads are equal at round 0 and diverge afterwards.
    pub fn new(model_cfg: ViTConfig, cfg: FedConfig, shards: Vec<ClientShard>, held_out: Dataset) -> Result<Self> {
        cfg.validate()?;
        model_cfg.validate()?;
        if shards.len() != cfg.num_clients {
            return Err(Error::Config(format!(
                "{} shards for num_clients = {}",
                shards.len(),
                cfg.num_clients
            )));
        }
        for (j, s) in shards.iter().enumerate() {
            let d = &s.train;
            if s.client_id != j {
                return Err(Error::Data(format!("shard {j} carries client id {}", s.client_id)));
            }
            if d.height != model_cfg.image_size || d.width != model_cfg.image_size || d.channels != model_cfg.channels {
                return Err(Error::Data(format!(
                    "client {j} images are {}x{}x{}, model expects {}x{}x{}",
                    d.height, d.width, d.channels, model_cfg.image_size, model_cfg.image_size, model_cfg.channels
                )));
            }
            if d.num_classes != model_cfg.num_classes {
                return Err(Error::Data(format!(
                    "client {j} has {} classes, model expects {}",
                    d.num_classes, model_cfg.num_classes
                )));
            }
        }
        let model = VisionTransformer::new(model_cfg, cfg.ratio)?;
        let init = model.init_params(cfg.seed)?;
        let clients = shards
            .into_iter()
            .map(|shard| ClientState {
                client_id: shard.client_id,
                shard,
                params: init.clone(),
                momentum: MomentumBuffers::new(),
            })
            .collect();
        Ok(Self {
            model,
            cfg,
            clients,
            held_out,
            rounds_done: 0,
            threads: 1,
        })
    }

    /// Train clients on up to `n` threads. Results do not depend on `n`.
    pub fn with_parallel_clients(mut self, n: usize) -> Self {
        self.threads = n.max(1);
        self
    }

    pub fn model(&self) -> &VisionTransformer {
        &self.model
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn held_out(&self) -> &Dataset {
        &self.held_out
    }

    pub fn rounds_done(&self) -> usize {
        self.rounds_done
    }

    fn train_all(&mut self, round: usize) -> Result<Vec<LocalStats>> {
        let (model, cfg) = (&self.model, &self.cfg);
        let run = |c: &mut ClientState| local_train(model, c, cfg, round);
        let results: Vec<Result<LocalStats>> = if self.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| self.clients.par_iter_mut().map(run).collect())
        } else {
            self.clients.iter_mut().map(run).collect()
        };
        results.into_iter().collect()
    }

    /// Local training, upload, aggregation and broadcast, then evaluation.
    /// `observer` sees every upload's exact bytes.
    pub fn run_round(&mut self, observer: &mut dyn FnMut(Upload<'_>)) -> Result<RoundReport> {
        let start = Instant::now();
        let round = self.rounds_done;
        let stats = self.train_all(round)?;

        let mut updates = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let bytes = c.upload()?;
            observer(Upload {
                round: round + 1,
                client_id: c.client_id,
                bytes: &bytes,
            });
            updates.push(receive(&bytes, c.client_id, c.num_samples())?);
        }
        let global = fedavg_aggregate(&updates)?;
        for c in self.clients.iter_mut() {
            c.params.merge(&global, ParamRole::Shared)?;
        }
        self.rounds_done += 1;

        let eval = self.evaluate()?;
        Ok(RoundReport {
            round: round + 1,
            ce: stats.iter().map(|s| s.ce).collect(),
            con: stats.iter().map(|s| s.con).collect(),
            local_auc: eval.local_auc,
            new_auc: eval.new_auc,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn evaluate(&self) -> Result<metrics::EvalResult> {
        let pairs: Vec<(&ParamStore, &Dataset)> = self.clients.iter().map(|c| (&c.params, &c.shard.test)).collect();
        metrics::evaluate(&self.model, &pairs, &self.held_out)
    }

    /// Runs the remaining rounds up to `cfg.rounds`.
    pub fn run(&mut self, observer: &mut dyn FnMut(Upload<'_>)) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::new();
        while self.rounds_done < self.cfg.rounds {
            let r = self.run_round(observer)?;
            log::info!(
                "round {}: local AUC {:.4}, new AUC {:.4}, L_con {:.4}",
                r.round,
                r.mean_local_auc(),
                r.new_auc,
                r.mean_con()
            );
            reports.push(r);
        }
        Ok(reports)
    }
}

/// Server side of an upload: decode, verify, and insist on Shared roles.
fn receive(bytes: &[u8], client_id: usize, num_samples: usize) -> Result<ClientUpdate> {
    let store = checkpoint::decode(bytes)?.verified()?;
    if let Some((name, _)) = store.iter().find(|(_, p)| p.role != ParamRole::Shared) {
        return Err(Error::Aggregation(format!("client {client_id} uploaded non-shared tensor `{name}`")));
    }
    Ok(ClientUpdate {
        client_id,
        params: store.iter().map(|(n, p)| (n.to_string(), p.tensor.clone())).collect(),
        num_samples,
    })
}

/// Final state of a finished federation.
pub struct FederationResult {
    pub reports: Vec<RoundReport>,
    pub clients: Vec<ClientState>,
}

/// Runs `cfg.rounds` rounds over `shards`, scoring the new test on `held_out`.
pub fn run_federation(
    cfg: &FedConfig,
    model_cfg: &ViTConfig,
    shards: Vec<ClientShard>,
    held_out: Dataset,
) -> Result<FederationResult> {
    let mut fed = Federation::new(model_cfg.clone(), cfg.clone(), shards, held_out)?;
    let reports = fed.run(&mut |_| {})?;
    Ok(FederationResult {
        reports,
        clients: fed.clients,
    })
}
