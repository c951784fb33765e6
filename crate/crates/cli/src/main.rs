use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use biguide::evalmetrics::write_predictions;
use biguide::model::Toggles;
use biguide::par::Exec;
use biguide::pipeline::{
    build_foundation, component_rows, default_sizes, format_table, generate_dataset, query_attention, run_ablation, run_bench, run_eval,
    train, variant_rows, BenchSize, Checkpoint, Foundation, RunConfig, TrainOptions,
};
use biguide::synthworld::Dataset;

mod heatmap;

const CONFIG_FILE: &str = "config.toml";
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "biguide", version, about = "Toy HOI detection guided by a frozen vision tower and caption LM")]
struct Cli {
    /// Run every data-parallel stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes and captions, then pretrain the frozen foundation models.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write only the scenes.
        #[arg(long)]
        skip_foundation: bool,
    },
    /// Train an interaction detector on a generated dataset.
    Train {
        /// Defaults to the config saved with the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Named component set: baseline, ef, ef+abg, ef+lsg or full.
        #[arg(long)]
        components: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split and print the mAP report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the ranked triplet predictions as JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and evaluate every ablation row over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, value_enum, default_value_t = RowSet::Components)]
        rows: RowSet,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the unified tower pass against the per-query reference.
    Bench {
        /// Comma-separated `NqxNf` pairs, e.g. `4x2,64x32`.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render attention heatmaps for selected pair queries on a test scene.
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Comma-separated query indices.
        #[arg(long, default_value = "0")]
        queries: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RowSet {
    Components,
    Variants,
    All,
}

fn load_config(path: Option<&Path>, fallback_dir: Option<&Path>) -> Result<RunConfig> {
    let path = match (path, fallback_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) if d.join(CONFIG_FILE).exists() => Some(d.join(CONFIG_FILE)),
        _ => None,
    };
    let cfg = match path {
        Some(p) => RunConfig::load(&p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|x| x.trim().parse::<T>().map_err(|e| anyhow::anyhow!("bad list item `{x}`: {e}"))).collect()
}

fn parse_sizes(s: &str) -> Result<Vec<BenchSize>> {
    s.split(',')
        .map(|item| {
            let (q, f) = item.trim().split_once('x').with_context(|| format!("size `{item}` is not NqxNf"))?;
            Ok(BenchSize { n_q: q.parse()?, n_f: f.parse()?, n_p: 16 })
        })
        .collect()
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::GenData { config, seed, out, skip_foundation } => {
            let mut cfg = load_config(config.as_deref(), None)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let data = generate_dataset(&cfg, exec)?;
            data.save(&out)?;
            std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
            log::info!("{} train / {} test scenes written to {}", data.train.len(), data.test.len(), out.display());
            if !skip_foundation {
                let f = build_foundation(&data.catalog, &cfg.model.tower, &cfg.foundation, exec)?;
                f.save(&out)?;
                log::info!("foundation models written to {}", out.display());
            }
        }
        Command::Train { config, data, out, seed, components, epochs } => {
            let mut cfg = load_config(config.as_deref(), Some(&data))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(name) = components {
                cfg.model.toggles = Toggles::named(&name)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let dataset = load_dataset(&data)?;
            let foundation = Foundation::load(&data)?;
            if foundation.tower.is_none() {
                log::warn!("no pretrained tower in {}; training against a random frozen tower", data.display());
            }
            let trained = train(&cfg, &dataset, &foundation, TrainOptions { exec, max_steps: None })?;
            std::fs::create_dir_all(&out)?;
            let ck = Checkpoint::from_store(&cfg, &dataset.catalog, &dataset.split, &trained.store, &trained.history);
            ck.save(&out.join(CHECKPOINT_FILE))?;
            write_json(Some(&out.join("history.json")), &trained.history)?;
            log::info!("{} steps; checkpoint written to {}", trained.steps, out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { checkpoint, data, out, predictions } => {
            let (json, ev) = run_eval(&checkpoint, &data, exec)?;
            if let Some(p) = predictions {
                write_predictions(&p, &ev.predictions)?;
            }
            match out {
                Some(p) => std::fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{json}"),
            }
        }
        Command::Ablate { config, data, seeds, rows, out } => {
            let cfg = load_config(config.as_deref(), Some(&data))?;
            let dataset = load_dataset(&data)?;
            let foundation = Foundation::load(&data)?;
            let rows = match rows {
                RowSet::Components => component_rows(),
                RowSet::Variants => variant_rows(),
                RowSet::All => component_rows().into_iter().chain(variant_rows()).collect(),
            };
            let seeds: Vec<u64> = (0..seeds as u64).map(|s| cfg.seed + s).collect();
            let results = run_ablation(&cfg, &rows, &seeds, &dataset, &foundation, exec)?;
            eprint!("{}", format_table(&results));
            write_json(out.as_deref(), &results)?;
        }
        Command::Bench { sizes, reps, seed, out } => {
            let sizes = match sizes {
                Some(s) => parse_sizes(&s)?,
                None => default_sizes(),
            };
            let rows = run_bench(&sizes, reps, seed)?;
            for r in &rows {
                eprintln!(
                    "N_q={:>3} N_f={:>3} N_p={:>3}  fast {:>9.3} ms  reference {:>9.3} ms  speedup {:>5.2}x  max|diff| {:.1e}",
                    r.n_q,
                    r.n_f,
                    r.n_p,
                    r.fast_seconds * 1e3,
                    r.reference_seconds * 1e3,
                    r.speedup,
                    r.max_abs_diff
                );
            }
            write_json(out.as_deref(), &rows)?;
        }
        Command::VizAttn { checkpoint, data, scene, queries, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            let sample = dataset.test.get(scene).with_context(|| format!("test split has {} scenes", dataset.test.len()))?;
            let (store, model) = ck.restore()?;
            let queries: Vec<usize> = parse_list(&queries)?;
            let image = model.prepare(&store, sample.scene.id, &sample.scene.image)?;
            let maps = query_attention(&store, &model, &image, &queries)?;
            std::fs::create_dir_all(&out)?;
            let mut written = Vec::new();
            for m in &maps {
                let (gh, gw) = m.detector_grid;
                let tg = m.tower_grid;
                for (tag, values, h, w) in [("a_ho", &m.a_ho, gh, gw), ("c_ho", &m.c_ho, tg, tg), ("c", &m.c, tg, tg)] {
                    let path = out.join(format!("scene{}_q{}_{}.png", sample.scene.id, m.query, tag));
                    heatmap::save_overlay(&path, &sample.scene.image, values, h, w)?;
                    written.push(path);
                }
            }
            write_json(Some(&out.join("attention.json")), &maps)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
