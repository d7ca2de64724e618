//! Config-driven runs: data preparation, federation, and the files written
//! to the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{self, ClientShard, Dataset, SkewSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fed::{reserve_new_test, FedConfig, Federation, RoundReport};
use crate::metrics;
use crate::partition::ParamRole;
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// FVD1 file, for `source = "file"`.
    pub path: Option<PathBuf>,
    /// Optional `index,client_id,split` sidecar; without it the file is
    /// partitioned with Dirichlet(`alpha`).
    pub assignment: Option<PathBuf>,
    pub per_client_n: usize,
    pub alpha: f64,
    /// Feature-skew strength; 0 disables per-client intensity shifts.
    pub shift_strength: f64,
    pub template_amplitude: f64,
    pub noise_std: f64,
    /// Per-client lower bound on samples of each class.
    pub min_per_class: usize,
    /// Share of every client's test split pooled for the new test.
    pub new_test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            assignment: None,
            per_client_n: 600,
            alpha: 0.3,
            shift_strength: 0.3,
            template_amplitude: 0.15,
            noise_std: 0.3,
            min_per_class: 30,
            new_test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub fed: FedConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses TOML; relative paths in `[data]` are taken relative to `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if let Some(base) = base {
            for p in [&mut cfg.data.path, &mut cfg.data.assignment].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.fed.validate()?;
        let d = &self.data;
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(Error::Config(format!("data.alpha must be positive, got {}", d.alpha)));
        }
        if !(0.0..1.0).contains(&d.shift_strength) {
            return Err(Error::Config(format!("data.shift_strength must lie in [0, 1), got {}", d.shift_strength)));
        }
        if !(0.0..0.5).contains(&d.new_test_fraction) {
            return Err(Error::Config(format!(
                "data.new_test_fraction must lie in [0, 0.5), got {}",
                d.new_test_fraction
            )));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.per_client_n == 0 {
                    return Err(Error::Config("data.per_client_n must be positive".into()));
                }
            }
            DataSource::File => {
                let path = d
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for source = \"file\"".into()))?;
                for p in std::iter::once(path).chain(&d.assignment) {
                    if !p.is_file() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                        ));
                    }
                }
            }
        }
        if self.model.num_classes != 2 {
            return Err(Error::Config("AUC evaluation needs model.num_classes = 2".into()));
        }
        Ok(())
    }

    fn skew(&self) -> SkewSpec {
        let (d, f) = (&self.data, &self.fed);
        if d.shift_strength > 0.0 {
            SkewSpec::with_random_shifts(d.alpha, f.num_clients, d.shift_strength, f.seed)
        } else {
            SkewSpec::label_only(d.alpha, f.seed)
        }
    }

    /// Client shards and the pooled new-test set.
    pub fn prepare_data(&self) -> Result<(Vec<ClientShard>, Dataset)> {
        let d = &self.data;
        let mut shards = match d.source {
            DataSource::Synthetic => {
                let mut spec = SyntheticSpec::new(
                    self.fed.num_clients,
                    d.per_client_n,
                    self.model.image_size,
                    self.model.num_classes,
                    self.skew(),
                );
                spec.template_amplitude = d.template_amplitude;
                spec.noise_std = d.noise_std;
                spec.min_per_class = d.min_per_class;
                data::generate_synthetic(&spec)?
            }
            DataSource::File => {
                let set = data::load_dataset(d.path.as_ref().expect("validated"))?;
                match &d.assignment {
                    Some(a) => data::shards_from_assignment(&set, &data::read_assignment(a)?)?,
                    None => data::partition_dataset(&set, self.fed.num_clients, &SkewSpec::label_only(d.alpha, self.fed.seed))?,
                }
            }
        };
        if shards.len() != self.fed.num_clients {
            return Err(Error::Config(format!(
                "data holds {} clients, fed.num_clients = {}",
                shards.len(),
                self.fed.num_clients
            )));
        }
        let pool = reserve_new_test(&mut shards, d.new_test_fraction, self.fed.seed)?;
        if pool.class_counts().contains(&0) {
            return Err(Error::Data("new-test pool lacks a class; raise data.new_test_fraction".into()));
        }
        Ok((shards, pool))
    }
}

/// What a finished run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub reports: Vec<RoundReport>,
    pub final_local_auc: Vec<f64>,
    pub final_new_auc: f64,
}

impl RunSummary {
    pub fn mean_local_auc(&self) -> f64 {
        self.final_local_auc.iter().sum::<f64>() / self.final_local_auc.len().max(1) as f64
    }

    pub fn summary_line(&self) -> String {
        format!(
            "final local-test AUC mean={:.6}, new-test AUC={:.6}",
            self.mean_local_auc(),
            self.final_new_auc
        )
    }
}

pub const METRICS_FILE: &str = "metrics.csv";

pub fn client_checkpoint_name(client: usize) -> String {
    format!("client{client}.fvt")
}

/// Runs the federation and writes `metrics.csv` plus one checkpoint per
/// client into `out`. Nothing is written if data preparation fails.
pub fn run(cfg: &RunConfig, out: &Path, parallel_clients: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let (shards, pool) = cfg.prepare_data()?;
    let mut fed = Federation::new(cfg.model.clone(), cfg.fed.clone(), shards, pool)?.with_parallel_clients(parallel_clients);
    let reports = fed.run(&mut |_| {})?;
    let rows: Vec<metrics::MetricRow> = reports.iter().flat_map(RoundReport::rows).collect();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join(METRICS_FILE);
    std::fs::write(&csv, metrics::metrics_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    for c in fed.clients() {
        checkpoint::save_checkpoint(&c.params, out.join(client_checkpoint_name(c.client_id)))?;
    }
    let last = reports.last().expect("rounds >= 1");
    Ok(RunSummary {
        final_local_auc: last.local_auc.clone(),
        final_new_auc: last.new_auc,
        reports,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: f64,
    pub mean_local_auc: f64,
    pub new_auc: f64,
}

pub const SWEEP_FILE: &str = "sweep.csv";

/// One run per ratio on identical data and seed; run `i` writes into
/// `out/p{ratio}`, and `out/sweep.csv` collects the final metrics.
pub fn sweep(cfg: &RunConfig, ratios: &[f64], out: &Path, parallel_clients: usize) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio".into()));
    }
    if let Some(p) = ratios.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("ratio {p} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut c = cfg.clone();
        c.fed.ratio = ratio;
        let s = run(&c, &out.join(format!("p{ratio}")), parallel_clients)?;
        rows.push(SweepRow {
            ratio,
            mean_local_auc: s.mean_local_auc(),
            new_auc: s.final_new_auc,
        });
    }
    let path = out.join(SWEEP_FILE);
    std::fs::write(&path, sweep_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("p,mean_local_auc,new_auc\n");
    for r in rows {
        writeln!(s, "{},{:.6},{:.6}", r.ratio, r.mean_local_auc, r.new_auc).unwrap();
    }
    s
}

/// Text listing of a checkpoint: one line per tensor, then totals.
pub fn inspect(ckpt: &Checkpoint) -> String {
    let mut s = String::new();
    for (name, p) in ckpt.store.iter() {
        let role = match p.role {
            ParamRole::Shared => "shared",
            ParamRole::Personalized => "personalized",
        };
        let status = if ckpt.checksum_failures.iter().any(|f| f == name) { "CORRUPT" } else { "ok" };
        writeln!(s, "{name}\t{:?}\t{role}\t{status}", p.tensor.shape()).unwrap();
    }
    let total = ckpt.store.numel(None);
    let personal = ckpt.store.numel(Some(ParamRole::Personalized));
    let frac = if total == 0 { 0.0 } else { 100.0 * personal as f64 / total as f64 };
    writeln!(
        s,
        "tensors: {}, parameters: {total}, personalized: {personal} ({frac:.2}%), checksum: {}",
        ckpt.store.len(),
        if ckpt.is_intact() { "ok" } else { "FAILED" }
    )
    .unwrap();
    s
}
