use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dpformer::analysis::{
    bench_clip, dump_attention, gumbel_report, moments_table, write_bench_csv, write_gumbel_csv, write_moments_csv,
};
use dpformer::config::RunConfig;
use dpformer::data::generate_zipf;
use dpformer::metrics::{evaluate, random_ndcg_at_k};
use dpformer::model::{Batch, Model};
use dpformer::reattention::{distraction_experiment, write_distraction_csv, DistractionConfig};
use dpformer::train::{load_dataset, plan_privacy, reattention_map, total_steps, train, CHECKPOINT_DIR};

#[derive(Parser)]
#[command(
    name = "dpformer",
    version,
    about = "Private training and analysis for tied-embedding sequence models"
)]
struct Cli {
    /// Where reports and run artifacts go.
    #[arg(long, global = true, env = "DPFORMER_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Skip runtime invariant checks.
    #[arg(long, global = true)]
    fast: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, base: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for p in base.iter().copied().chain(self.config.as_deref()) {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("parsing {}", p.display()))?;
        }
        for s in &self.sets {
            cfg.apply_assignment(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Tsv,
    Cache,
}

#[derive(Subcommand)]
enum Command {
    /// Train with per-sample clipping and calibrated noise.
    Train(ConfigArgs),
    /// Evaluate a trained run's checkpoint on its held-out items.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare memory and time of phantom and naive per-sample clipping.
    BenchClip {
        #[arg(long, value_delimiter = ',', default_value = "32")]
        batch: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        len: usize,
        #[arg(long, default_value_t = 2000)]
        vocab: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic against sampled activation variances.
    AnalyzeMoments {
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Attention inflation of a noisy key, raw and corrected.
    AnalyzeDistraction {
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Monte-Carlo check of the Gumbel-max logsumexp identity.
    AnalyzeGumbel {
        #[arg(long, default_value_t = 10)]
        vectors: usize,
        #[arg(long, default_value_t = 1_000_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write raw and corrected attention matrices of a trained run.
    DumpAttention {
        #[arg(long)]
        run: PathBuf,
        /// Number of test users to dump.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic Zipf interaction dataset.
    GenData {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
        #[arg(long, default_value_t = 1.0)]
        exponent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "tsv")]
        format: DataFormat,
    },
}

fn out_dir(cli: &Cli, fallback: &Path) -> Result<PathBuf> {
    let d = cli.output_dir.clone().unwrap_or_else(|| fallback.to_path_buf());
    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    Ok(d)
}

/// Writes `name` into `dir` and echoes it to stdout.
fn emit(dir: &Path, name: &str, body: &[u8]) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    io::stdout().write_all(body)?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let here = Path::new(".");
    match &cli.command {
        Command::Train(args) => {
            let mut cfg = args.load(None)?;
            if let Some(d) = &cli.output_dir {
                cfg.output_dir = d.clone();
            }
            if cli.fast {
                cfg.checked = false;
            }
            let data = load_dataset(&cfg)?;
            let out = train::<f64>(&cfg, &data, Some(&cfg.output_dir))?;
            if let Some(w) = out.privacy.delta_warning(out.dataset_size) {
                eprintln!("warning: {w}");
            }
            println!("{}", out.privacy_statement());
            if let Some(m) = out.metrics.last() {
                println!(
                    "epoch {} ndcg@10 {:.4} hit@10 {:.4} (random ranking {:.4})",
                    m.epoch,
                    m.eval.ndcg,
                    m.eval.hit,
                    random_ndcg_at_k(data.num_items, 10)
                );
            }
            eprintln!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Eval { run, cfg } => {
            let cfg = cfg.load(Some(&run.join("config.txt")))?;
            let data = load_dataset(&cfg)?;
            let model = Model::<f64>::load(&run.join(CHECKPOINT_DIR))?;
            let privacy = plan_privacy(&cfg, &data, total_steps(&cfg, &data)?)?;
            let reattn = reattention_map(&cfg, &data, &privacy)?;
            let r = evaluate(&model, &data, 10, cfg.eval_batch_size, reattn.as_ref())?;
            let body = format!("ndcg_at_10,hit_at_10,loss\n{},{},{}\n", r.ndcg, r.hit, r.loss);
            emit(&out_dir(cli, run)?, "eval.csv", body.as_bytes())?;
        }
        Command::BenchClip {
            batch,
            len,
            vocab,
            dim,
            seed,
        } => {
            let mut rows = Vec::new();
            for &b in batch {
                rows.extend(bench_clip(b, *len, *vocab, *dim, *seed)?);
            }
            let mut body = Vec::new();
            write_bench_csv(&mut body, &rows)?;
            emit(&out_dir(cli, here)?, "bench_clip.csv", &body)?;
        }
        Command::AnalyzeMoments { draws, seed } => {
            let rows = moments_table(*draws, *seed)?;
            if !cli.fast {
                if let Some(r) = rows.iter().find(|r| !(r.analytic >= 0.0 && r.sampled >= 0.0)) {
                    bail!("negative variance in moment table: {r:?}");
                }
            }
            let mut body = Vec::new();
            write_moments_csv(&mut body, &rows)?;
            emit(&out_dir(cli, here)?, "moments.csv", &body)?;
        }
        Command::AnalyzeDistraction { draws, seed } => {
            let cfg = DistractionConfig {
                draws: *draws,
                seed: *seed,
                ..Default::default()
            };
            let rows = distraction_experiment(&cfg)?;
            if !cli.fast {
                if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.mc_score)) {
                    bail!("attention score outside [0, 1]: {r:?}");
                }
            }
            let mut body = Vec::new();
            write_distraction_csv(&mut body, &rows)?;
            emit(&out_dir(cli, here)?, "distraction.csv", &body)?;
        }
        Command::AnalyzeGumbel { vectors, draws, seed } => {
            let rows = gumbel_report(*vectors, *draws, *seed)?;
            let mut body = Vec::new();
            write_gumbel_csv(&mut body, &rows)?;
            emit(&out_dir(cli, here)?, "gumbel.csv", &body)?;
        }
        Command::DumpAttention { run, samples, cfg } => {
            let cfg = cfg.load(Some(&run.join("config.txt")))?;
            let data = load_dataset(&cfg)?;
            let model = Model::<f64>::load(&run.join(CHECKPOINT_DIR))?;
            let n = (*samples).clamp(1, data.num_users());
            let hist: Vec<&[usize]> = (0..n).map(|u| data.train_prefix(u)).collect();
            let batch =
                Batch::from_histories(&hist, (0..n).map(|u| data.test_item(u)).collect(), model.config.max_len)?;
            let privacy = plan_privacy(&cfg, &data, total_steps(&cfg, &data)?)?;
            let reattn = reattention_map(&cfg, &data, &privacy)?;
            let dir = out_dir(cli, run)?;
            let (raw, corrected) = dump_attention(&model, &batch, reattn.as_ref(), &dir)?;
            println!("{}\n{}", raw.display(), corrected.display());
        }
        Command::GenData {
            users,
            items,
            min_len,
            max_len,
            exponent,
            seed,
            format,
        } => {
            let data = generate_zipf(*users, *items, (*min_len, *max_len), *exponent, *seed)?;
            let dir = out_dir(cli, here)?;
            match format {
                DataFormat::Tsv => {
                    let p = dir.join("interactions.tsv");
                    let mut w = BufWriter::new(fs::File::create(&p)?);
                    data.to_log().write_tsv(&mut w)?;
                    w.flush()?;
                    println!("{}", p.display());
                }
                DataFormat::Cache => {
                    let p = dir.join("dataset");
                    data.write_cache(&p)?;
                    println!("{}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
