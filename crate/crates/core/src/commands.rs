//! The pipeline steps behind each CLI subcommand. Each returns its results
//! and a printable summary; the binary only parses arguments and maps errors
//! to exit codes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{ActivationVariant, GroupSource, InitMode, LoadedConfig, ResolvedNetwork};
use crate::cost::{bits_to_mb, cost_network, savings, CostReport, NetworkDescriptor, Savings};
use crate::data::{load_dataset, synthetic, Dataset, Split};
use crate::error::{Error, Result};
use crate::grouping::{group_count_summary, record_activation_profiles, windowed_cluster};
use crate::io_util::write_atomic;
use crate::model::Model;
use crate::mpc::{reconcile, sim_network, FixedModel};
use crate::tensor::Tensor;
use crate::train::{metrics_csv, train, EpochMetrics};
use crate::tv::{layer_tv, tv_csv, LayerTv};

fn resolve(cfg: &LoadedConfig, variant: &str, groups_dir: Option<&Path>) -> Result<ResolvedNetwork> {
    let mut net = cfg.resolve(variant)?;
    if let Some(dir) = groups_dir {
        net.base_dir = Some(dir.to_path_buf());
    }
    Ok(net)
}

fn datasets(cfg: &LoadedConfig, net: &ResolvedNetwork, limit: Option<usize>) -> Result<(Dataset, Dataset)> {
    let source = cfg
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config(format!("config `{}` names no dataset", cfg.config.name)))?;
    load_dataset(source, net.input, net.classes, cfg.base_dir.as_deref(), limit)
}

/// Loads a checkpoint and rebuilds its model from the variant it records.
pub fn load_model(cfg: &LoadedConfig, path: &Path, groups_dir: Option<&Path>) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.network != cfg.config.name {
        return Err(Error::format(format!(
            "{} holds network `{}`, the config describes `{}`",
            path.display(),
            ckpt.meta.network,
            cfg.config.name
        )));
    }
    let net = resolve(cfg, &ckpt.meta.variant, groups_dir)?;
    Model::from_checkpoint(&net, &ckpt)
}

/// Writes `<artifact>.meta.json` holding the wall-clock time and run details.
/// Timestamps live only here so the artifacts themselves stay reproducible.
fn write_sidecar(artifact: &Path, command: &str, details: serde_json::Value) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let doc = serde_json::json!({
        "command": command,
        "created_unix": created,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "details": details,
    });
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    write_atomic(&artifact.with_file_name(name), serde_json::to_string_pretty(&doc)?.as_bytes())
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: String,
    pub variant: String,
    pub seed: Option<u64>,
    pub limit: Option<usize>,
    pub epochs: Option<usize>,
    pub init: Option<InitMode>,
    /// Warm-start source.
    pub checkpoint: Option<PathBuf>,
    pub groups_dir: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<EpochMetrics>,
    pub warm_started: Vec<String>,
}

pub fn cmd_train(args: &TrainArgs, mut progress: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    let cfg = LoadedConfig::load(&args.config)?;
    let net = resolve(&cfg, &args.variant, args.groups_dir.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.config.seed);
    let mut training = cfg.config.training.clone();
    if let Some(e) = args.epochs {
        training.epochs = e;
    }
    let init = args.init.unwrap_or(training.init);
    let (train_set, test_set) = datasets(&cfg, &net, args.limit)?;
    let mut model = Model::new(&net, seed, &BTreeMap::new())?;
    let warm_started = match (init, &args.checkpoint) {
        (InitMode::Warm, Some(path)) => {
            let copied = model.load_matching(&Checkpoint::load(path)?);
            log::info!("init: warm start from {} ({} tensors copied)", path.display(), copied.len());
            copied
        }
        (InitMode::Warm, None) => {
            log::info!("init: warm start requested without a checkpoint; training from scratch");
            Vec::new()
        }
        (InitMode::Scratch, _) => {
            log::info!("init: from scratch");
            Vec::new()
        }
    };
    let metrics = train(&mut model, &train_set, &test_set, &training, seed, &mut progress)?;
    let stem = format!("{}_{}", net.name, net.variant);
    let checkpoint = args.out.join(format!("{stem}.rlsh"));
    let metrics_path = args.out.join(format!("{stem}_metrics.csv"));
    model.to_checkpoint().save(&checkpoint)?;
    write_atomic(&metrics_path, metrics_csv(&metrics).as_bytes())?;
    write_sidecar(
        &checkpoint,
        "train",
        serde_json::json!({
            "config": args.config,
            "variant": net.variant,
            "seed": seed,
            "init": format!("{init:?}").to_lowercase(),
            "warm_started": warm_started,
            "training": training,
        }),
    )?;
    Ok(TrainOutcome {
        checkpoint,
        metrics_path,
        metrics,
        warm_started,
    })
}

#[derive(Debug, Clone)]
pub struct ClusterArgs {
    pub config: String,
    /// Model trained with plain ReLU at the clustered layers.
    pub checkpoint: PathBuf,
    /// Take layers, windows, `k` and file names from this variant's
    /// clustered layers. Without it, `layer` and `k` are required.
    pub variant: Option<String>,
    pub layer: Option<String>,
    /// Tile size; `None` clusters the whole plane at once.
    pub window: Option<usize>,
    pub k: Option<usize>,
    pub split: Split,
    pub limit: Option<usize>,
    pub max_samples: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ClusterJob {
    pub layer: String,
    pub window: Option<usize>,
    pub k: usize,
    pub file: String,
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub layer: String,
    pub spec_path: PathBuf,
    pub groups_per_channel: Vec<usize>,
}

fn cluster_jobs(cfg: &LoadedConfig, args: &ClusterArgs) -> Result<Vec<ClusterJob>> {
    let Some(variant) = &args.variant else {
        let (Some(layer), Some(k)) = (&args.layer, args.k) else {
            return Err(Error::invalid("give --variant, or --layer with --k"));
        };
        let w = args.window.map_or_else(|| "all".to_string(), |w| w.to_string());
        return Ok(vec![ClusterJob {
            layer: layer.clone(),
            window: args.window,
            k,
            file: format!("{}_{layer}_w{w}_k{k}.json", cfg.config.name),
        }]);
    };
    let net = cfg.resolve(variant)?;
    let jobs: Vec<ClusterJob> = net
        .layers
        .iter()
        .filter(|l| args.layer.as_deref().is_none_or(|name| name == l.name()))
        .filter_map(|l| match &l.activation {
            Some(ActivationVariant::Grelu(g)) => match &g.groups {
                GroupSource::Clustered { window, k, file } => Some(ClusterJob {
                    layer: l.name().to_string(),
                    window: Some(*window),
                    k: *k,
                    file: file
                        .clone()
                        .unwrap_or_else(|| format!("{}_{variant}_{}.json", cfg.config.name, l.name())),
                }),
                _ => None,
            },
            _ => None,
        })
        .collect();
    if jobs.is_empty() {
        return Err(Error::invalid(format!("variant `{variant}` has no matching clustered layer")));
    }
    Ok(jobs)
}

/// Clusters training-split activation profiles into grouping specs. Specs go
/// to `out`, together with per-channel cluster maps and group counts.
pub fn cmd_cluster(args: &ClusterArgs) -> Result<Vec<ClusterOutcome>> {
    if args.split != Split::Train {
        return Err(Error::invalid(
            "clustering uses training activations only; the test split is refused",
        ));
    }
    let cfg = LoadedConfig::load(&args.config)?;
    let jobs = cluster_jobs(&cfg, args)?;
    let model = load_model(&cfg, &args.checkpoint, None)?;
    let net = model.network();
    let (train_set, _) = datasets(&cfg, net, args.limit)?;
    let max = args.max_samples.unwrap_or(cfg.config.training.max_profile_samples);
    let mut outcomes = Vec::with_capacity(jobs.len());
    for job in jobs {
        let idx = net.layer_index(&job.layer)?;
        if !model.is_activation(idx) {
            return Err(Error::invalid(format!("layer `{}` carries no ReLU", job.layer)));
        }
        if model.gate(idx).is_some() {
            log::warn!("layer `{}` is already gated; profiles come from its pre-activations", job.layer);
        }
        let [channels, h, w] = model.layer_input_shape(idx)?;
        let window = job.window.unwrap_or(h.max(w));
        let profiles = record_activation_profiles(&model, &train_set, idx, max)?;
        let (spec, maps) = windowed_cluster(&profiles, window, job.k)?;
        let spec_path = args.out.join(&job.file);
        write_atomic(&spec_path, serde_json::to_string(&spec)?.as_bytes())?;
        let stem = job.file.trim_end_matches(".json");
        let maps_dir = args.out.join(format!("{stem}_maps"));
        for (c, m) in maps.iter().enumerate() {
            m.export(&maps_dir, &format!("channel{c:03}"))?;
        }
        write_atomic(
            &args.out.join(format!("{stem}_counts.csv")),
            group_count_summary(&spec, channels).as_bytes(),
        )?;
        write_sidecar(
            &spec_path,
            "cluster",
            serde_json::json!({
                "checkpoint": args.checkpoint,
                "layer": job.layer,
                "window": window,
                "k": job.k,
                "max_samples": max,
            }),
        )?;
        log::info!("clustered `{}` ({window}x{window}, k={}) into {}", job.layer, job.k, spec_path.display());
        outcomes.push(ClusterOutcome {
            layer: job.layer,
            spec_path,
            groups_per_channel: (0..channels).map(|c| spec.group_count(c)).collect(),
        });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone)]
pub struct CostOutcome {
    pub report: CostReport,
    pub baseline: Option<CostReport>,
    pub savings: Option<Savings>,
    pub text: String,
}

/// Analytic cost of `variant`, optionally against a `compare` baseline.
/// Group counts come from the configuration alone, so no grouping files are
/// needed.
pub fn cmd_cost(config: &str, variant: &str, compare: Option<&str>, out: Option<&Path>) -> Result<CostOutcome> {
    let cfg = LoadedConfig::load(config)?;
    let params = cfg.config.protocol.params();
    let report_for = |v: &str| -> Result<CostReport> {
        cost_network(&NetworkDescriptor::from_network(&cfg.resolve(v)?)?, &params)
    };
    let report = report_for(variant)?;
    let mut text = report.to_table();
    let (baseline, saved) = match compare {
        Some(b) => {
            let base = report_for(b)?;
            let s = savings(&base, &report)?;
            let _ = writeln!(
                text,
                "vs {b}: {} -> {} rounds ({:.1}% saved), {:.2} -> {:.2} MB ({:.1}% saved)",
                base.total_rounds, report.total_rounds, s.rounds_pct, base.total_mb, report.total_mb, s.comm_pct
            );
            (Some(base), Some(s))
        }
        None => (None, None),
    };
    if let Some(dir) = out {
        let stem = format!("{}_{}_cost", report.network, report.variant);
        let doc = serde_json::json!({ "report": report, "baseline": baseline, "savings": saved });
        write_atomic(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&doc)?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.txt")), text.as_bytes())?;
    }
    Ok(CostOutcome {
        report,
        baseline,
        savings: saved,
        text,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountRow {
    pub layer: String,
    pub channels: usize,
    pub n_drelu: usize,
    pub n_mul: usize,
    /// Sign tests of the original network at this layer over this variant's.
    pub reduction: f64,
}

impl CountRow {
    /// `(DReLU, Mul)` per channel.
    pub fn per_channel(&self) -> (usize, usize) {
        (self.n_drelu / self.channels, self.n_mul / self.channels)
    }
}

#[derive(Debug, Clone)]
pub struct CountOutcome {
    pub rows: Vec<CountRow>,
    /// Total sign tests of the original network over this variant's.
    pub reduction: f64,
    pub text: String,
    pub csv: String,
}

fn gate_rows(desc: &NetworkDescriptor) -> Vec<(String, usize, usize, usize)> {
    desc.layers
        .iter()
        .filter_map(|d| {
            let (n_drelu, n_mul) = d.gate_ops()?;
            Some((d.name().to_string(), d.channels()?, n_drelu, n_mul))
        })
        .collect()
}

pub fn cmd_count(config: &str, variant: &str) -> Result<CountOutcome> {
    let cfg = LoadedConfig::load(config)?;
    let desc = NetworkDescriptor::from_network(&cfg.resolve(variant)?)?;
    let base = gate_rows(&NetworkDescriptor::from_network(&cfg.resolve("original")?)?);
    let rows: Vec<CountRow> = gate_rows(&desc)
        .into_iter()
        .map(|(layer, channels, n_drelu, n_mul)| {
            let original = base.iter().find(|b| b.0 == layer).map_or(n_mul, |b| b.2);
            CountRow {
                reduction: original as f64 / n_drelu as f64,
                layer,
                channels,
                n_drelu,
                n_mul,
            }
        })
        .collect();
    let total_drelu: usize = rows.iter().map(|r| r.n_drelu).sum();
    let total_mul: usize = rows.iter().map(|r| r.n_mul).sum();
    let base_drelu: usize = base.iter().map(|b| b.2).sum();
    let reduction = base_drelu as f64 / total_drelu as f64;

    let mut text = format!("{} / {}\n", desc.name, desc.variant);
    let _ = writeln!(
        text,
        "{:<8} {:>22} {:>12} {:>12} {:>10}",
        "layer", "per channel (DReLU,Mul)", "DReLU", "Mul", "reduction"
    );
    let mut csv = String::from("layer,channels,drelu_per_channel,mul_per_channel,n_drelu,n_mul,reduction\n");
    for r in &rows {
        let (d, m) = r.per_channel();
        let _ = writeln!(
            text,
            "{:<8} {:>22} {:>12} {:>12} {:>10}",
            r.layer,
            format!("({d},{m})"),
            r.n_drelu,
            r.n_mul,
            format!("x{:.0}", r.reduction)
        );
        let _ = writeln!(csv, "{},{},{d},{m},{},{},{:.4}", r.layer, r.channels, r.n_drelu, r.n_mul, r.reduction);
    }
    let _ = writeln!(
        text,
        "{:<8} {:>22} {total_drelu:>12} {total_mul:>12} {:>10}",
        "total",
        "",
        format!("x{reduction:.1}")
    );
    let pair: Vec<String> = rows.iter().take(2).map(|r| r.per_channel().0.to_string()).collect();
    let _ = writeln!(text, "DReLU per channel, first two layers: ({})", pair.join(","));
    Ok(CountOutcome {
        rows,
        reduction,
        text,
        csv,
    })
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: String,
    pub variant: String,
    /// Trained model; without one, freshly initialized parameters are used.
    pub checkpoint: Option<PathBuf>,
    pub n_images: usize,
    pub seed: Option<u64>,
    /// Use uniform random images instead of the test split.
    pub random_inputs: bool,
    pub groups_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutcome {
    pub network: String,
    pub variant: String,
    pub images: usize,
    pub bit_exact: usize,
    pub argmax_agree: usize,
    pub reconciled: usize,
    pub rounds: Vec<u64>,
    pub total_mb: f64,
    pub predicted_rounds: u64,
    pub predicted_mb: f64,
    pub mismatches: Vec<String>,
    #[serde(skip)]
    pub text: String,
}

impl SimulateOutcome {
    pub fn equivalence_passed(&self) -> bool {
        self.bit_exact == self.images
    }

    pub fn reconciliation_passed(&self) -> bool {
        self.reconciled == self.images
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<SimulateOutcome> {
    if args.n_images == 0 {
        return Err(Error::invalid("simulate at least one image"));
    }
    let cfg = LoadedConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.config.seed);
    let model = match &args.checkpoint {
        Some(p) => load_model(&cfg, p, args.groups_dir.as_deref())?,
        None => Model::new(&resolve(&cfg, &args.variant, args.groups_dir.as_deref())?, seed, &BTreeMap::new())?,
    };
    let net = model.network().clone();
    let fm = FixedModel::from_model(&model)?;
    let images: Vec<Vec<f64>> = if args.random_inputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..args.n_images).map(|_| (0..fm.input_len).map(|_| rng.random::<f64>()).collect()).collect()
    } else {
        let (_, test) = datasets(&cfg, &net, Some(args.n_images))?;
        (0..test.len()).map(|i| test.image(i).to_vec()).collect()
    };

    let mut outcome = SimulateOutcome {
        network: net.name.clone(),
        variant: net.variant.clone(),
        images: images.len(),
        bit_exact: 0,
        argmax_agree: 0,
        reconciled: 0,
        rounds: Vec::with_capacity(images.len()),
        total_mb: 0.0,
        predicted_rounds: fm.report.total_rounds,
        predicted_mb: fm.report.total_mb,
        mismatches: Vec::new(),
        text: String::new(),
    };
    let mut logits_csv = String::from("image,class,logit,reference_class,float_class\n");
    let shape = [1, net.input.channels, net.input.height, net.input.width];
    for (i, img) in images.iter().enumerate() {
        let out = sim_network(&fm, img, seed.wrapping_add(i as u64))?;
        let float = model.forward(&Tensor::new(shape.to_vec(), img.clone())?)?;
        let decoded = out.decoded(&fm.fp);
        let sim_class = Tensor::new(vec![1, decoded.len()], decoded.clone())?.argmax_rows()[0];
        let float_class = float.argmax_rows()[0];
        let reference: Vec<f64> = out.reference.iter().map(|&v| fm.fp.decode(v)).collect();
        let ref_class = Tensor::new(vec![1, reference.len()], reference)?.argmax_rows()[0];
        let _ = writeln!(logits_csv, "{i},{sim_class},{:.6},{ref_class},{float_class}", decoded[sim_class]);
        if out.equivalent() {
            outcome.bit_exact += 1;
        } else {
            outcome.mismatches.push(format!(
                "image {i}: first mismatch at layer `{}`",
                out.first_mismatch.as_deref().unwrap_or("?")
            ));
        }
        if sim_class == float_class {
            outcome.argmax_agree += 1;
        }
        let rec = reconcile(&out.log, &fm.report);
        if rec.passed() {
            outcome.reconciled += 1;
        } else {
            outcome.mismatches.extend(rec.mismatches.iter().map(|m| format!("image {i}: {m}")));
        }
        outcome.rounds.push(out.log.rounds());
        if i == 0 {
            outcome.total_mb = out.log.total_bytes() as f64 / 1e6;
            if let Some(dir) = &args.out {
                let stem = format!("{}_{}", net.name, net.variant);
                let ledger = dir.join(format!("{stem}_ledger.csv"));
                write_atomic(&ledger, out.log.to_csv().as_bytes())?;
                write_atomic(&dir.join(format!("{stem}_ledger.json")), out.log.to_json()?.as_bytes())?;
            }
        }
    }
    let n = outcome.images;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let mut text = format!("{} / {}: {n} image(s)\n", net.name, net.variant);
    let _ = writeln!(text, "{:>8}  {:>10}", "Rounds", "Comm (MB)");
    let _ = writeln!(text, "{:>8}  {:>10.2}", outcome.rounds[0], outcome.total_mb);
    let _ = writeln!(
        text,
        "plaintext equivalence: {} ({}/{n} bit-exact, argmax agrees with float on {}/{n})",
        verdict(outcome.equivalence_passed()),
        outcome.bit_exact,
        outcome.argmax_agree
    );
    let _ = writeln!(
        text,
        "ledger reconciliation: {} (predicted {} rounds, {:.2} MB)",
        verdict(outcome.reconciliation_passed()),
        outcome.predicted_rounds,
        outcome.predicted_mb
    );
    for m in outcome.mismatches.iter().take(10) {
        let _ = writeln!(text, "  {m}");
    }
    if let Some(dir) = &args.out {
        let stem = format!("{}_{}", net.name, net.variant);
        write_atomic(&dir.join(format!("{stem}_logits.csv")), logits_csv.as_bytes())?;
        let summary = dir.join(format!("{stem}_simulate.json"));
        write_atomic(&summary, serde_json::to_string_pretty(&outcome)?.as_bytes())?;
        write_sidecar(&summary, "simulate", serde_json::json!({ "seed": seed, "images": n }))?;
    }
    outcome.text = text;
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct TvOutcome {
    pub rows: Vec<LayerTv>,
    pub csv: String,
}

pub fn cmd_tv(config: &str, checkpoint: &Path, limit: Option<usize>, out: Option<&Path>) -> Result<TvOutcome> {
    let cfg = LoadedConfig::load(config)?;
    let model = load_model(&cfg, checkpoint, None)?;
    let (_, test) = datasets(&cfg, model.network(), limit)?;
    let rows = layer_tv(&model, &test, limit.unwrap_or(usize::MAX))?;
    let csv = tv_csv(&rows);
    if let Some(dir) = out {
        let net = model.network();
        write_atomic(&dir.join(format!("{}_{}_tv.csv", net.name, net.variant)), csv.as_bytes())?;
    }
    Ok(TvOutcome { rows, csv })
}

/// Writes the configured synthetic dataset as `<name>_train.csv` and
/// `<name>_test.csv`.
pub fn cmd_synth(config: &str, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let cfg = LoadedConfig::load(config)?;
    let Some(crate::config::DatasetConfig::Synthetic { train, test, noise, seed }) = &cfg.config.dataset else {
        return Err(Error::config(format!("config `{}` has no synthetic dataset", cfg.config.name)));
    };
    let input = cfg.config.input;
    let (tr, te) = synthetic(input, cfg.config.classes, *train, *test, *noise, *seed)?;
    let paths = (
        out.join(format!("{}_train.csv", cfg.config.name)),
        out.join(format!("{}_test.csv", cfg.config.name)),
    );
    write_atomic(&paths.0, tr.to_csv().as_bytes())?;
    write_atomic(&paths.1, te.to_csv().as_bytes())?;
    Ok(paths)
}

/// Human summary of training metrics.
pub fn describe_metrics(metrics: &[EpochMetrics]) -> String {
    metrics.last().map_or_else(String::new, |m| {
        format!(
            "epoch {}: loss {:.4}, train accuracy {:.2}%, test accuracy {:.2}%",
            m.epoch,
            m.train_loss,
            m.train_accuracy * 100.0,
            m.test_accuracy * 100.0
        )
    })
}

/// Megabytes of a cost report entry, for callers that print single layers.
pub fn entry_mb(report: &CostReport, layer: &str) -> Option<f64> {
    report.entry(layer).map(|e| bits_to_mb(e.comm_bits))
}
