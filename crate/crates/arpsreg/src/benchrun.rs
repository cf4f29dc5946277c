//! Multi-method benchmark runner: evaluates registration methods over a
//! dataset manifest and writes per-method JSON-line reports plus summary
//! and recall-curve CSVs.

use crate::arps::network::{config_from_meta, network_forward};
use crate::data::manifest::{load_pair, read_manifest};
use crate::data::RegistrationPair;
use crate::error::{Error, Result};
use crate::gmm::{em_register, EmConfig};
use crate::icp::{icp_refine, IcpConfig};
use crate::metrics::{compute_metrics, recall_curve, MetricSummary, RegistrationReport, Thresholds};
use crate::rigid::RigidTransform;
use arpsreg_nn::ParamStore;
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseMethod {
    /// Classical EM registration baseline.
    Em,
    /// The learned pipeline with attention and recentering forced off
    /// (per-point-MLP membership baseline).
    DeepGmrLike,
    /// The full learned pipeline, configured from its checkpoint.
    Arps,
}

impl BaseMethod {
    fn name(&self) -> &'static str {
        match self {
            BaseMethod::Em => "em",
            BaseMethod::DeepGmrLike => "deepgmr_like",
            BaseMethod::Arps => "arps",
        }
    }

    fn needs_checkpoint(&self) -> bool {
        !matches!(self, BaseMethod::Em)
    }
}

/// A method selector of the form `base[+icp][:checkpoint]`.
#[derive(Debug, Clone)]
pub struct MethodSpec {
    pub base: BaseMethod,
    pub icp: bool,
    pub checkpoint: Option<PathBuf>,
}

impl MethodSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (name, ckpt) = match s.split_once(':') {
            Some((n, c)) => (n, Some(PathBuf::from(c))),
            None => (s, None),
        };
        let (base_name, icp) = match name.strip_suffix("+icp") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let base = match base_name {
            "em" => BaseMethod::Em,
            "deepgmr_like" => BaseMethod::DeepGmrLike,
            "arps" => BaseMethod::Arps,
            other => {
                return Err(Error::Config(format!(
                    "unknown method '{other}' (expected em, deepgmr_like or arps)"
                )))
            }
        };
        if base.needs_checkpoint() && ckpt.is_none() {
            return Err(Error::MissingCheckpoint(name.to_string()));
        }
        Ok(MethodSpec {
            base,
            icp,
            checkpoint: ckpt,
        })
    }

    pub fn name(&self) -> String {
        if self.icp {
            format!("{}+icp", self.base.name())
        } else {
            self.base.name().to_string()
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub thresholds: Thresholds,
    /// Record wall times. Off by default so report files are byte-stable
    /// across reruns.
    pub timing: bool,
    pub em: EmConfig,
    pub icp: IcpConfig,
    pub seed: u64,
    pub rot_grid: Vec<f64>,
    pub trans_grid: Vec<f64>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            thresholds: Thresholds::modelnet(),
            timing: false,
            em: EmConfig::default(),
            icp: IcpConfig::default(),
            seed: 0,
            rot_grid: (0..=12).map(|i| 2.5 * i as f64).collect(),
            trans_grid: (0..=10).map(|i| 0.05 * i as f64).collect(),
        }
    }
}

pub struct MethodRun {
    pub method: String,
    pub reports: Vec<RegistrationReport>,
    pub summary: MetricSummary,
}

enum Predictor {
    Em(EmConfig),
    Network {
        store: ParamStore<f32>,
        cfg: crate::arps::ArpsConfig,
    },
}

impl Predictor {
    fn build(spec: &MethodSpec, opts: &BenchOptions) -> Result<Self> {
        match spec.base {
            BaseMethod::Em => Ok(Predictor::Em(opts.em)),
            BaseMethod::DeepGmrLike | BaseMethod::Arps => {
                let path = spec
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::MissingCheckpoint(spec.name()))?;
                let store = ParamStore::<f32>::load(path)?;
                let mut cfg = config_from_meta(&store)?;
                if spec.base == BaseMethod::DeepGmrLike {
                    cfg.disable_attention = true;
                    cfg.disable_recenter = true;
                }
                Ok(Predictor::Network { store, cfg })
            }
        }
    }

    fn predict(&self, pair: &RegistrationPair) -> Result<RigidTransform> {
        match self {
            Predictor::Em(cfg) => Ok(em_register(&pair.source, &pair.target, cfg)?.transform),
            Predictor::Network { store, cfg } => {
                let out = network_forward(&pair.source, &pair.target, store, cfg, false)?;
                out.predicted_transform()
            }
        }
    }
}

/// Runs every method over every manifest pair. Reports are ordered by
/// pair id regardless of scheduling.
pub fn run_benchmark(
    methods: &[MethodSpec],
    manifest_path: &Path,
    opts: &BenchOptions,
    out_dir: &Path,
) -> Result<Vec<MethodRun>> {
    let records = read_manifest(manifest_path)?;
    if records.is_empty() {
        return Err(Error::InvalidInput("manifest has no pairs".into()));
    }
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        pairs.push(load_pair(&base, rec)?);
    }
    std::fs::create_dir_all(out_dir)?;

    let mut runs = Vec::with_capacity(methods.len());
    for spec in methods {
        let predictor = Predictor::build(spec, opts)?;
        let name = spec.name();
        let results: Vec<Result<RegistrationReport>> = pairs
            .par_iter()
            .zip(records.par_iter())
            .map(|(pair, rec)| {
                let started = Instant::now();
                let mut t = predictor.predict(pair)?;
                if spec.icp {
                    t = icp_refine(&pair.source, &pair.target, &t, &opts.icp)?.transform;
                }
                let wall = if opts.timing {
                    started.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                };
                Ok(RegistrationReport::new(
                    rec.pair_id,
                    &name,
                    &t,
                    &pair.t_gt,
                    &opts.thresholds,
                    wall,
                    rec.seed,
                ))
            })
            .collect();
        let mut reports = Vec::with_capacity(results.len());
        for r in results {
            reports.push(r?);
        }
        reports.sort_by_key(|r| r.pair_id);

        let report_path = out_dir.join(format!("{name}.jsonl"));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&report_path)?);
        for r in &reports {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;

        let summary = compute_metrics(&reports, &opts.thresholds)?;
        runs.push(MethodRun {
            method: name,
            reports,
            summary,
        });
    }

    write_summary_csv(&out_dir.join("summary.csv"), &runs)?;
    write_recall_csv(&out_dir.join("recall_curve.csv"), &runs, opts)?;
    Ok(runs)
}

fn write_summary_csv(path: &Path, runs: &[MethodRun]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,n_pairs,mre,mte,recall,rre,rte")?;
    for run in runs {
        let s = &run.summary;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            run.method,
            s.n_pairs,
            s.mre,
            s.mte,
            s.recall,
            opt(s.rre),
            opt(s.rte)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_recall_csv(path: &Path, runs: &[MethodRun], opts: &BenchOptions) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "method,rot_threshold_deg,trans_threshold,recall")?;
    for run in runs {
        for pt in recall_curve(&run.reports, &opts.rot_grid, &opts.trans_grid) {
            writeln!(
                w,
                "{},{},{},{}",
                run.method, pt.rot_threshold_deg, pt.trans_threshold, pt.recall
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summarizes pre-existing report files instead of running methods.
pub fn summarize_reports(
    report_paths: &[PathBuf],
    thresholds: &Thresholds,
    out_dir: &Path,
    rot_grid: &[f64],
    trans_grid: &[f64],
) -> Result<Vec<MethodRun>> {
    use std::io::BufRead;
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for path in report_paths {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut reports: Vec<RegistrationReport> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            reports.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?);
        }
        if reports.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} holds no reports",
                path.display()
            )));
        }
        let method = reports[0].method.clone();
        let summary = compute_metrics(&reports, thresholds)?;
        runs.push(MethodRun {
            method,
            reports,
            summary,
        });
    }
    write_summary_csv(&out_dir.join("summary.csv"), &runs)?;
    let opts = BenchOptions {
        rot_grid: rot_grid.to_vec(),
        trans_grid: trans_grid.to_vec(),
        ..BenchOptions::default()
    };
    write_recall_csv(&out_dir.join("recall_curve.csv"), &runs, &opts)?;
    Ok(runs)
}
