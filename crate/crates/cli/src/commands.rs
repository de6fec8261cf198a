use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cdlg::checkpoint::{load_checkpoint, save_checkpoint};
use cdlg::encoder::{encode, EncoderParams};
use cdlg::graph::{
    load_bundle, load_content_cites, load_split_file, make_planetoid_split, save_bundle, synth_sbm,
    Bundle,
};
use cdlg::probe::{accuracy, evaluate, train_probe, Evaluation, Metrics, ProbeFit};
use cdlg::trainer::{export_log, train};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_run_config, RunConfig};
use crate::fail::{CliError, CliResult};
use crate::{Cli, Command, PrepareArgs, SynthArgs};

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.jobs == 0 {
        return Err(CliError::config("--jobs must be at least 1"));
    }
    match &cli.command {
        Command::Prepare(args) => prepare(&cli, args),
        Command::Synth(args) => synth(&cli, args),
        Command::Train => cmd_train(&cli),
        Command::Eval { checkpoint } => cmd_eval(&cli, checkpoint.as_deref()),
        Command::Embed { checkpoint, output } => cmd_embed(&cli, checkpoint, output.as_deref()),
        Command::Grid => cmd_grid(&cli),
    }
}

fn out_dir(cli: &Cli, cfg: Option<&RunConfig>) -> CliResult<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| CliError::config("no output directory: pass --out or set out_dir"))?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::data(format!("creating {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes through a temporary file so readers never see a partial result.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn run_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::config("--config is required for this command"))?;
    let mut cfg = load_run_config(path, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.probe.seed = seed;
    }
    cfg.probe.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> CliResult<Bundle> {
    let bundle = load_bundle(&cfg.bundle)?;
    cfg.train.validate(bundle.graph.num_features())?;
    Ok(bundle)
}

fn seeds(cli: &Cli, cfg: &RunConfig) -> Vec<u64> {
    cli.seeds.clone().unwrap_or_else(|| vec![cfg.train.seed])
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))
}

fn report_sizes(bundle: &Bundle) {
    let (tr, va, te) = bundle.split.sizes();
    println!(
        "n={} edges={} f={} C={} train={tr} val={va} test={te}",
        bundle.graph.num_nodes(),
        bundle.graph.edge_count(),
        bundle.graph.num_features(),
        bundle.labels.num_classes()
    );
}

fn prepare(cli: &Cli, args: &PrepareArgs) -> CliResult<()> {
    let dir = out_dir(cli, None)?;
    let ds = load_content_cites(&args.content, &args.cites)?;
    let split = match &args.split {
        Some(path) => load_split_file(path, ds.graph.num_nodes())?,
        None => make_planetoid_split(
            &ds.labels,
            args.sizes.per_class,
            args.sizes.val,
            args.sizes.test,
            cli.seed.unwrap_or(0),
        )?,
    };
    save_bundle(&ds.graph, &ds.labels, &split, &dir)?;
    let r = &ds.report;
    if r.unknown_endpoint_lines + r.self_loops > 0 {
        eprintln!(
            "skipped {} citation lines with unknown ids and {} self-citations",
            r.unknown_endpoint_lines, r.self_loops
        );
    }
    report_sizes(&Bundle {
        graph: ds.graph,
        labels: ds.labels,
        split,
    });
    Ok(())
}

fn synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let dir = out_dir(cli, None)?;
    let seed = cli.seed.unwrap_or(0);
    let (graph, labels) = synth_sbm(
        &args.blocks,
        args.p_in,
        args.p_out,
        args.features,
        args.signal,
        seed,
    )?;
    let split = make_planetoid_split(&labels, args.per_class, args.val, args.test, seed)?;
    save_bundle(&graph, &labels, &split, &dir)?;
    report_sizes(&Bundle {
        graph,
        labels,
        split,
    });
    Ok(())
}

fn cmd_train(cli: &Cli) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let bundle = load_data(&cfg)?;
    let out = train(&bundle.graph, &cfg.train)?;
    save_checkpoint(
        &dir.join("checkpoint.bin"),
        &out.params,
        &cfg.train.encoder,
        cfg.train.seed,
        out.best_epoch,
    )?;
    export_log(&out.log, &dir.join("loss.csv"))?;
    write_json(&dir.join("config.json"), &cfg)?;
    let b = out.best_loss;
    println!(
        "epochs={} best_epoch={} early_stop={} l_p={:.6} l_ns={:.6} l_ci={:.6} l_total={:.6}",
        out.log.len(),
        out.best_epoch,
        out.stopped_early,
        b.l_p,
        b.l_ns,
        b.l_ci,
        b.l_total
    );
    Ok(())
}

fn checkpoint_params(
    path: &Path,
    cfg: &RunConfig,
    num_features: usize,
) -> CliResult<EncoderParams> {
    let ck = load_checkpoint(path)?;
    let (want, have) = (&cfg.train.encoder, &ck.header.encoder);
    if want.channels != have.channels
        || want.dim != have.dim
        || ck.header.num_features != num_features
    {
        return Err(CliError::config(format!(
            "checkpoint has K={} d={} f={}, config and bundle need K={} d={} f={}",
            have.channels, have.dim, ck.header.num_features, want.channels, want.dim, num_features
        )));
    }
    Ok(ck.params)
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    dataset: String,
    seeds: Vec<u64>,
    runs: Vec<Metrics>,
    mean: f64,
    std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_eval(cli: &Cli, checkpoint: Option<&Path>) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let bundle = load_data(&cfg)?;
    let fixed = checkpoint
        .map(|p| checkpoint_params(p, &cfg, bundle.graph.num_features()))
        .transpose()?;
    let seeds = seeds(cli, &cfg);

    let one = |seed: u64| -> CliResult<Metrics> {
        let mut rc = cfg.clone();
        rc.probe.seed = seed;
        if cli.seeds.is_some() {
            rc.train.seed = seed;
        }
        // each run gets its own counters
        let split = bundle.split.clone();
        let params = match &fixed {
            Some(p) => p.clone(),
            None => {
                let out = train(&bundle.graph, &rc.train)?;
                export_log(&out.log, &dir.join(format!("loss-{}.csv", rc.train.seed)))?;
                out.params
            }
        };
        let ev: Evaluation = evaluate(
            &bundle.graph,
            &bundle.labels,
            &split,
            &params,
            &rc.train.encoder,
            &rc.probe,
        )?;
        Ok(Metrics::new(&cfg.dataset, &rc.train, &ev))
    };
    let runs: Vec<Metrics> =
        pool(cli.jobs)?.install(|| seeds.par_iter().map(|&s| one(s)).collect::<CliResult<_>>())?;

    write_json(&dir.join("config.json"), &cfg)?;
    if cli.seeds.is_none() {
        let m = &runs[0];
        write_json(&dir.join("metrics.json"), m)?;
        println!(
            "test_accuracy={:.4} val_accuracy={:.4} lambda={}",
            m.test_accuracy, m.val_accuracy, m.lambda
        );
    } else {
        let accs: Vec<f64> = runs.iter().map(|m| m.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        write_json(
            &dir.join("metrics.json"),
            &SeedSummary {
                dataset: cfg.dataset.clone(),
                seeds,
                runs,
                mean,
                std,
            },
        )?;
        println!(
            "test_accuracy mean={mean:.4} std={std:.4} over {} seeds",
            accs.len()
        );
    }
    Ok(())
}

fn cmd_embed(cli: &Cli, checkpoint: &Path, output: Option<&Path>) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let bundle = load_data(&cfg)?;
    let params = checkpoint_params(checkpoint, &cfg, bundle.graph.num_features())?;
    let z = encode(&bundle.graph, &params, &cfg.train.encoder)?.concat();
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => out_dir(cli, Some(&cfg))?.join("embeddings.csv"),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let width = z.cols();
    let mut header = vec!["node_id".to_string()];
    header.extend((0..width).map(|j| format!("z{j}")));
    w.write_record(&header)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    for u in 0..z.rows() {
        let mut row = vec![u.to_string()];
        row.extend(z.row(u).iter().map(|v| v.to_string()));
        w.write_record(&row)
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&path, &bytes)?;
    println!(
        "wrote {} rows x {} columns to {}",
        z.rows(),
        width + 1,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    channels: usize,
    p_re: f64,
    p_mf: f64,
    val_accuracy: f64,
    lambda: f64,
    best_epoch: usize,
    best_loss: f64,
}

struct Winner {
    cell: usize,
    val: f64,
    params: EncoderParams,
    fit: ProbeFit,
}

fn cmd_grid(cli: &Cli) -> CliResult<()> {
    let cfg = run_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let bundle = load_bundle(&cfg.bundle)?;
    let spec = cfg
        .grid
        .clone()
        .ok_or_else(|| CliError::config("config has no `grid` section"))?;
    let mut cells: Vec<(usize, f64, f64)> = Vec::new();
    for &k in &spec.channels {
        for &r in &spec.p_re {
            for &m in &spec.p_mf {
                cells.push((k, r, m));
            }
        }
    }
    if cells.is_empty() {
        return Err(CliError::config("grid is empty"));
    }
    let mut configs = Vec::with_capacity(cells.len());
    for &(k, r, m) in &cells {
        let mut tc = cfg.train.clone();
        tc.encoder.channels = k;
        tc.augment.p_re = r;
        tc.augment.p_mf = m;
        tc.augment.view1 = None;
        tc.augment.view2 = None;
        tc.validate(bundle.graph.num_features())?;
        configs.push(tc);
    }
    eprintln!("grid: {} cells on {} threads", cells.len(), cli.jobs);

    let winner: Mutex<Option<Winner>> = Mutex::new(None);
    let rows: Vec<GridRow> = pool(cli.jobs)?.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(cell, tc)| -> CliResult<GridRow> {
                let out = train(&bundle.graph, tc)?;
                let z = encode(&bundle.graph, &out.params, &tc.encoder)?.concat();
                let fit = train_probe(&z, &bundle.labels, &bundle.split, &cfg.probe)?;
                let row = GridRow {
                    channels: tc.encoder.channels,
                    p_re: tc.augment.p_re,
                    p_mf: tc.augment.p_mf,
                    val_accuracy: fit.val_accuracy,
                    lambda: fit.lambda,
                    best_epoch: out.best_epoch,
                    best_loss: out.best_loss.l_total,
                };
                let mut w = winner.lock().expect("no panics while held");
                let better = w.as_ref().is_none_or(|b| {
                    fit.val_accuracy > b.val || (fit.val_accuracy == b.val && cell < b.cell)
                });
                if better {
                    *w = Some(Winner {
                        cell,
                        val: fit.val_accuracy,
                        params: out.params,
                        fit,
                    });
                }
                Ok(row)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[b]
            .val_accuracy
            .total_cmp(&rows[a].val_accuracy)
            .then(a.cmp(&b))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    for &i in &order {
        w.serialize(&rows[i])
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&dir.join("grid.csv"), &bytes)?;

    let best = winner
        .into_inner()
        .expect("lock")
        .expect("grid is non-empty");
    let tc = &configs[best.cell];
    let z = encode(&bundle.graph, &best.params, &tc.encoder)?.concat();
    let test_accuracy = accuracy(
        &best.fit.params,
        &z,
        bundle.labels.classes(),
        bundle.split.test_idx(),
    );
    let ev = Evaluation {
        test_accuracy,
        val_accuracy: best.fit.val_accuracy,
        lambda: best.fit.lambda,
    };
    let metrics = Metrics::new(&cfg.dataset, tc, &ev);
    write_json(&dir.join("best.json"), &metrics)?;
    write_json(&dir.join("config.json"), &cfg)?;
    println!(
        "best K={} p_re={} p_mf={} val={:.4} test={:.4}",
        metrics.k, metrics.p_re, metrics.p_mf, metrics.val_accuracy, metrics.test_accuracy
    );
    Ok(())
}
