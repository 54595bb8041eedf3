use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use itnet::builder::{build_itnet, HyperParams, ParamStore};
use itnet::config::{DatasetSpec, RunConfig};
use itnet::cost::CostReport;
use itnet::graph::{execute, ExecMode};
use itnet::ntf::{NtfFile, NtfTensor};
use itnet::report::report_rows;
use itnet::search::{grid_search, rank_and_select, GridSpec};
use itnet::sim::{simulate, SimConfig};
use itnet::train::{
    gen_synthetic_dataset, hparams_from_checkpoint, params_from_checkpoint, Dataset, HistoryRecord, TrainConfig,
    Trainer, DEFAULT_Y0,
};

#[derive(Parser)]
#[command(
    name = "itnet",
    version,
    about = "Build, train, analyze and search iterative segmentation networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the cost report of a network as JSON.
    Analyze {
        #[command(flatten)]
        hp: HpArgs,
        /// Also write the graph as JSON.
        #[arg(long, value_name = "PATH")]
        dump_graph: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train from a run config, writing a checkpoint and a history log.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Label maps of every output for a batch of images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// NTF file with an `images` tensor `[B, H, W, 3]`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "infer")]
        out_dir: PathBuf,
    },
    /// Grid search over (L, N, K) at a MAC budget.
    Search {
        /// Run config supplying the base network, training recipe and data.
        config: PathBuf,
        #[arg(long, default_value = "L=1,2;N=2,4;K=0,1")]
        grid: String,
        /// MACs of the last output.
        #[arg(long)]
        budget: f64,
        #[arg(long, value_enum, default_value = "both")]
        shared: Sharing,
        #[arg(long, default_value = "cells.json")]
        out: PathBuf,
        /// Peak mIoU margin for ranking.
        #[arg(long, default_value_t = 0.02)]
        gap: f64,
        #[arg(long, default_value_t = DEFAULT_Y0)]
        y0: f64,
    },
    /// Latency and throughput on a memory-bound streaming accelerator.
    Simulate {
        #[command(flatten)]
        hp: HpArgs,
        /// On-chip memory in bytes (`inf` for unbounded).
        #[arg(long)]
        capacity: f64,
        #[arg(long, default_value_t = 1.0)]
        t_layer: f64,
        #[arg(long, default_value_t = 1000.0)]
        t_reconfig: f64,
        /// Samples per partition residency.
        #[arg(long, default_value_t = 1)]
        batch: u64,
    },
    /// Join a training history with a cost report into CSV series.
    Report {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as NTF.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = parse_extent, default_value = "64x64")]
        input: (usize, usize),
        #[arg(short = 'C', default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct HpArgs {
    #[arg(short = 'L', default_value_t = 3)]
    l: usize,
    #[arg(short = 'N', default_value_t = 16)]
    n: usize,
    #[arg(short = 'K', default_value_t = 1)]
    k: usize,
    #[arg(short = 'f', default_value_t = 51)]
    f: usize,
    /// Input extent as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_extent, default_value = "480x360")]
    input: (usize, usize),
    #[arg(short = 'C', default_value_t = 11)]
    classes: usize,
    #[arg(long, conflicts_with = "independent")]
    shared: bool,
    #[arg(long)]
    independent: bool,
}

impl HpArgs {
    fn hparams(&self) -> HyperParams {
        let (w, h) = self.input;
        HyperParams::new(self.l, self.n, self.k, self.f, self.classes, h, w, !self.independent)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Sharing {
    Yes,
    No,
    Both,
}

fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(w)?, num(h)?))
}

/// Bad input (exit 2) or a failure while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait UsageContext<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| run(cli.cmd));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("ITNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("ITNET_THREADS must be a positive integer, got {v:?}"))
        .usage()?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Analyze { hp, dump_graph, out } => analyze(&hp, dump_graph.as_deref(), out.as_deref()),
        Cmd::Train {
            config,
            out_dir,
            resume,
        } => train(&config, &out_dir, resume.as_deref()),
        Cmd::Infer {
            checkpoint,
            images,
            out_dir,
        } => infer(&checkpoint, &images, &out_dir),
        Cmd::Search {
            config,
            grid,
            budget,
            shared,
            out,
            gap,
            y0,
        } => search(&config, &grid, budget, shared, &out, gap, y0),
        Cmd::Simulate {
            hp,
            capacity,
            t_layer,
            t_reconfig,
            batch,
        } => {
            let cfg = SimConfig {
                capacity_bytes: capacity,
                t_layer,
                t_reconfig,
                batch,
            };
            cfg.validate().usage()?;
            let g = build_itnet(&hp.hparams()).usage()?;
            let cost = CostReport::compute(&g)?;
            let r = simulate(&g, &cost, cfg)?;
            emit_json(&serde_json::to_value(r)?, None)
        }
        Cmd::Report { history, cost, out } => report(&history, &cost, out.as_deref()),
        Cmd::Synth {
            count,
            input: (w, h),
            classes,
            seed,
            out,
        } => {
            let d = gen_synthetic_dataset(seed, count, h, w, classes).usage()?;
            d.to_ntf()
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

fn emit_json(v: &serde_json::Value, out: Option<&Path>) -> CmdResult {
    let text = serde_json::to_string_pretty(v)? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn analyze(hp: &HpArgs, dump_graph: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let g = build_itnet(&hp.hparams()).usage()?;
    if let Some(p) = dump_graph {
        emit_json(&g.to_json(), Some(p))?;
    }
    emit_json(&CostReport::compute(&g)?.to_json(), out)
}

fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    let hp = &cfg.hparams;
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            train_count,
            eval_count,
            seed,
        } => {
            let gen = |s, n| gen_synthetic_dataset(s, n, hp.input_h, hp.input_w, hp.classes);
            Ok((
                gen(*seed, *train_count).usage()?,
                gen(seed.wrapping_add(1), *eval_count).usage()?,
            ))
        }
        DatasetSpec::Files { train, eval } => {
            let load = |p: &Path| -> Result<Dataset, Failure> {
                let f = NtfFile::load(p)
                    .with_context(|| format!("reading {}", p.display()))
                    .usage()?;
                let d = Dataset::from_ntf(&f)
                    .with_context(|| format!("dataset {}", p.display()))
                    .usage()?;
                if d.classes() != hp.classes || d.extent() != (hp.input_h, hp.input_w) {
                    return Err(Failure::Usage(anyhow!(
                        "{}: {} classes at {:?}, network expects {} at {:?}",
                        p.display(),
                        d.classes(),
                        d.extent(),
                        hp.classes,
                        (hp.input_h, hp.input_w)
                    )));
                }
                Ok(d)
            };
            Ok((load(train)?, load(eval)?))
        }
    }
}

fn train(config: &Path, out_dir: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = RunConfig::load(config).usage()?;
    let (data, eval) = load_datasets(&cfg)?;
    let g = build_itnet(&cfg.hparams).usage()?;
    let tc: TrainConfig = cfg.train_config();
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = NtfFile::load(p)
                .with_context(|| format!("reading {}", p.display()))
                .usage()?;
            Trainer::resume(g, &ckpt, tc).usage()?
        }
        None => Trainer::new(g.clone(), ParamStore::init(&g, cfg.seed), tc).usage()?,
    };
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let history_path = out_dir.join("history.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&history_path)
        .with_context(|| format!("opening {}", history_path.display()))?;
    let mut history = BufWriter::new(file);
    let mut write_err = None;
    let total = trainer.total_steps(&data).usage()?;
    info!("training {} steps from step {}", total, trainer.step());
    let run = trainer.run(&data, &eval, |rec: &HistoryRecord| {
        info!(
            "epoch {} step {} loss {:.4} mIoU(last) {:.4}",
            rec.epoch,
            rec.step,
            rec.loss,
            rec.miou.last().copied().unwrap_or(f64::NAN)
        );
        let line = serde_json::to_string(rec).expect("plain data serializes");
        if let Err(e) = writeln!(history, "{line}").and_then(|()| history.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e)
            .context(format!("writing {}", history_path.display()))
            .into());
    }
    let ckpt_path = out_dir.join("checkpoint.ntf");
    let saved = trainer.checkpoint().save(&ckpt_path);
    let summary = run?;
    saved.with_context(|| format!("writing {}", ckpt_path.display()))?;
    if let (Some(a), Some(b)) = (summary.losses.first(), summary.losses.last()) {
        info!("loss {a:.4} -> {b:.4}; checkpoint {}", ckpt_path.display());
    }
    Ok(())
}

fn infer(checkpoint: &Path, images: &Path, out_dir: &Path) -> CmdResult {
    let ckpt = NtfFile::load(checkpoint)
        .with_context(|| format!("reading {}", checkpoint.display()))
        .usage()?;
    let hp = hparams_from_checkpoint(&ckpt).usage()?;
    let g = build_itnet(&hp).usage()?;
    let params = params_from_checkpoint(&g, &ckpt, 0).usage()?;
    let x = NtfFile::load(images)
        .with_context(|| format!("reading {}", images.display()))
        .usage()?
        .get("images")
        .and_then(NtfTensor::to_tensor)
        .usage()?;
    let cost = CostReport::compute(&g)?;
    let pass = execute(&g, &x, &params, ExecMode::Infer).usage()?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut index = Vec::new();
    for (i, o) in cost.outputs.iter().enumerate() {
        let labels = pass.output(i)?.argmax_channels()?;
        let mut f = NtfFile::new();
        f.push(NtfTensor::labels("labels", &labels));
        f.push(NtfTensor::u8("meta/macs", vec![8], o.macs.to_le_bytes().to_vec()));
        let name = format!("output_{:02}.ntf", o.n);
        f.save(out_dir.join(&name))?;
        index.push(serde_json::json!({ "output": o.n, "file": name, "macs": o.macs }));
    }
    emit_json(&serde_json::Value::Array(index), Some(&out_dir.join("outputs.json")))
}

#[allow(clippy::too_many_arguments)]
fn search(config: &Path, grid: &str, budget: f64, sharing: Sharing, out: &Path, gap: f64, y0: f64) -> CmdResult {
    let cfg = RunConfig::load(config).usage()?;
    let grid = GridSpec::parse(grid).usage()?;
    if !(budget.is_finite() && budget >= 1.0) {
        return Err(Failure::Usage(anyhow!(
            "budget must be a positive MAC count, got {budget}"
        )));
    }
    let (data, eval) = load_datasets(&cfg)?;
    let tc = cfg.train_config();
    let evaluate = |hp: &HyperParams, g: &itnet::CompGraph| -> Result<Vec<f64>, String> {
        let mut t = Trainer::new(g.clone(), ParamStore::init(g, cfg.seed), tc.clone()).map_err(|e| e.to_string())?;
        let s = t.run(&data, &eval, |_| {}).map_err(|e| e.to_string())?;
        info!(
            "cell L={} N={} K={} f={} shared={} done",
            hp.l, hp.n, hp.k, hp.f, hp.shared
        );
        s.history
            .last()
            .map(|r| r.miou.clone())
            .ok_or_else(|| "no evaluation recorded".to_string())
    };
    let classes: &[bool] = match sharing {
        Sharing::Yes => &[true],
        Sharing::No => &[false],
        Sharing::Both => &[true, false],
    };
    let runs: Vec<_> = classes
        .iter()
        .map(|&shared| grid_search(&grid, &cfg.hparams, shared, budget as u64, y0, evaluate))
        .collect();
    let cells: Vec<_> = runs.iter().flatten().cloned().collect();
    emit_json(&serde_json::to_value(&cells)?, Some(out))?;
    for c in cells.iter().filter(|c| c.error.is_some()) {
        log::warn!(
            "cell L={} N={} K={} shared={}: {}",
            c.l,
            c.n,
            c.k,
            c.shared,
            c.error.as_deref().unwrap_or("")
        );
    }
    if let [s, i] = runs.as_slice() {
        let sel = rank_and_select(s, i, gap)?;
        emit_json(&serde_json::to_value(&sel)?, None)?;
    }
    Ok(())
}

fn report(history: &Path, cost: &Path, out: Option<&Path>) -> CmdResult {
    let text = std::fs::read_to_string(history)
        .with_context(|| format!("reading {}", history.display()))
        .usage()?;
    let records: Vec<HistoryRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", history.display(), i + 1)))
        .collect::<Result<_, _>>()
        .usage()?;
    let cost: CostReport = serde_json::from_str(
        &std::fs::read_to_string(cost)
            .with_context(|| format!("reading {}", cost.display()))
            .usage()?,
    )
    .with_context(|| format!("parsing {}", cost.display()))
    .usage()?;
    let rows = report_rows(&cost, &records).map_err(|e| anyhow!(e)).usage()?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
