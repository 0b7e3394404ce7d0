//! Command-line surface: dataset generation, training, evaluation, ad-hoc
//! retrieval, the ablation grid, and attention-map export.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use persearch_core::attention::CrossAttentionRecord;
use persearch_core::data::{
    generate_synthetic, Dataset, Manifest, Split, SyntheticSpec, Tokenizer,
};
use persearch_core::model::Model;
use persearch_core::retrieval::{rank_gallery, GalleryIndex};
use persearch_core::train::{
    build_gallery, evaluate, run_ablation, standard_grid, train, Checkpoint, TrainConfig,
};

/// Environment override prefix: PERSEARCH_<FIELD>=value.
const ENV_PREFIX: &str = "PERSEARCH_";

#[derive(Parser)]
#[command(name = "persearch", version, about = "Coarse-to-fine cross-modal person retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic person dataset (images/, annotations.json, manifest.json).
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: Recall@K over a split.
    Eval(EvalArgs),
    /// Rank a gallery for one free-form text query.
    Retrieve(RetrieveArgs),
    /// Run the ablation grid and emit a comparison table.
    Ablate(AblateArgs),
    /// Export decoder attention maps for one image/caption pair.
    PlotAttn(PlotAttnArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// TOML or JSON file with generator settings (defaults used when absent).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset to start from.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Flat key = value config file (TOML) layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual field overrides, e.g. --set epochs=20 (applied last).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    /// Precedence: preset < config file < PERSEARCH_* env < --set.
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let table: toml::Table = text.parse().context("config file must be a flat TOML table")?;
            for (key, value) in table {
                let raw = match value {
                    toml::Value::String(s) => s,
                    toml::Value::Array(items) => items
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                cfg.set_field(&key, &raw)
                    .with_context(|| format!("config field `{key}`"))?;
            }
        }
        let applied = cfg.apply_env_overrides(ENV_PREFIX)?;
        if !applied.is_empty() {
            eprintln!("env overrides: {}", applied.join(", "));
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set wants KEY=VALUE, got `{kv}`"))?;
            cfg.set_field(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data or an annotations.json layout).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report R@K per granularity (global / coarse / fine alone).
    #[arg(long)]
    per_granularity: bool,
    /// Write the machine-readable report here (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Persist the gallery embedding index here.
    #[arg(long)]
    save_index: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Free-form text query.
    #[arg(long)]
    query: String,
    /// Dataset directory or a saved .emb index file.
    #[arg(long)]
    gallery: PathBuf,
    /// Gallery split when building from a dataset directory.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `standard` (six rows) or `table2` (the four component rows).
    #[arg(long, default_value = "standard")]
    grid: String,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct PlotAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Record index within the dataset (pairs an image with its caption).
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Retrieve(args) => run_retrieve(args),
        Command::Ablate(args) => run_ablate(args),
        Command::PlotAttn(args) => plot_attn(args),
    }
}

fn parse_split(name: &str) -> Result<Split> {
    Ok(name.parse::<Split>()?)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text)?
            } else {
                toml::from_str(&text).context("spec must be TOML (or .json)")?
            }
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let manifest = generate_synthetic(&spec, &args.out)?;
    let ds = Dataset::load(&args.out)?;
    println!(
        "generated {} identities, {} images, {} records at {}",
        manifest.identities.len(),
        ds.images.len(),
        ds.records.len(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let dataset = Dataset::load(&args.data)?;
    fs::create_dir_all(&args.out)?;
    let mut log = fs::File::create(args.out.join("train_log.jsonl"))?;
    println!(
        "training on {} records / {} identities ({} epochs, batch {})",
        dataset.records_in(Split::Train).len(),
        dataset.num_identities,
        cfg.epochs,
        cfg.batch_size
    );
    let outcome = train(&cfg, &dataset, Some(&mut log))?;
    if outcome.truncated_captions > 0 {
        eprintln!(
            "warning: {} captions exceeded max_words and were truncated",
            outcome.truncated_captions
        );
    }
    for h in &outcome.history {
        if h.val_r1.is_some() || h.epoch == cfg.epochs || h.epoch % 10 == 0 {
            println!(
                "epoch {:3}  lr {:.1e}  total {:ned$.4}  val R@1 {}",
                h.epoch,
                h.lr,
                h.mean_total,
                h.val_r1.map_or("-".to_string(), |v| format!("{v:.4}")),
                ned = 10
            );
        }
    }
    let best_path = args.out.join("best.ckpt");
    outcome.best.save(&best_path)?;
    outcome.last.save(&args.out.join("last.ckpt"))?;
    fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&outcome.history)?,
    )?;
    println!(
        "saved best (epoch {}, val R@1 {}) to {}",
        outcome.best.epoch,
        outcome
            .best
            .best_val_r1
            .map_or("-".to_string(), |v| format!("{v:.4}")),
        best_path.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, Model, Tokenizer)> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ckpt.model.clone();
    let tokenizer = ckpt.tokenizer();
    Ok((ckpt, model, tokenizer))
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let (_, model, tokenizer) = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let split = parse_split(&args.split)?;
    let report = evaluate(
        &model,
        &tokenizer,
        &dataset,
        split,
        &[1, 5, 10],
        args.per_granularity,
    )?;
    println!(
        "split {}  gallery {}  queries {}",
        report.split, report.num_gallery, report.num_queries
    );
    for (k, v) in &report.recall {
        println!("R@{k:<3} {v:.4}");
    }
    if let Some(per) = &report.per_granularity {
        for (family, recalls) in per {
            let line: Vec<String> = recalls.iter().map(|(k, v)| format!("R@{k}={v:.4}")).collect();
            println!("{family:<8} {}", line.join("  "));
        }
    }
    if let Some(path) = &args.report {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", path.display());
    }
    if let Some(path) = &args.save_index {
        let index = build_gallery(&model, &dataset, split)?;
        index.save(path)?;
        println!("gallery index written to {}", path.display());
    }
    Ok(())
}

fn run_retrieve(args: RetrieveArgs) -> Result<()> {
    let (_, model, tokenizer) = load_checkpoint(&args.checkpoint)?;
    let index = if args.gallery.is_dir() {
        let dataset = Dataset::load(&args.gallery)?;
        build_gallery(&model, &dataset, parse_split(&args.split)?)?
    } else {
        GalleryIndex::load(&args.gallery)?
    };
    let ids = tokenizer.encode(&args.query);
    if ids.iter().all(|&i| i == 0) {
        eprintln!("warning: no query word is in the training vocabulary");
    }
    let out = model.embed_text(&ids)?;
    let result = rank_gallery(0, &out.set, &index, Some(args.top_k), true)?;
    println!("{:<6} {:>10} {:>9}  breakdown (global / coarse / fine)", "image", "identity", "score");
    for (rank, ((id, ident), score)) in result
        .ranked_ids
        .iter()
        .zip(&result.identities)
        .zip(&result.scores)
        .enumerate()
    {
        let bd = result.breakdowns.as_ref().map(|b| &b[rank]);
        let detail = bd.map_or(String::new(), |b| {
            format!(
                "{:.3} / {:.3} / {:.3}",
                b.global,
                b.coarse.iter().sum::<f64>(),
                b.fine.iter().sum::<f64>()
            )
        });
        println!("{id:<6} {ident:>10} {score:>9.4}  {detail}");
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let dataset = Dataset::load(&args.data)?;
    let manifest = Manifest::load(&args.data.join("manifest.json")).ok();
    let grid = match args.grid.as_str() {
        "standard" => standard_grid(&cfg),
        "table2" => standard_grid(&cfg)
            .into_iter()
            .filter(|(name, _)| {
                matches!(
                    name.as_str(),
                    "baseline" | "coarse" | "coarse+fine" | "coarse+fine+cmr"
                )
            })
            .collect(),
        other => bail!("unknown grid `{other}` (expected standard or table2)"),
    };
    println!("running {} ablation rows...", grid.len());
    let report = run_ablation(&grid, &dataset, manifest.as_ref())?;
    let table = report.render_table();
    println!("{table}");
    for row in &report.rows {
        if let Some(audit) = &row.commonality {
            println!(
                "{}: mean commonality shared parts {:.4} vs unique parts {:.4}",
                row.name, audit.shared_mean, audit.unique_mean
            );
        }
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.txt"), &table)?;
    fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("reports written to {}", args.out.display());
    Ok(())
}

fn plot_attn(args: PlotAttnArgs) -> Result<()> {
    let (_, model, tokenizer) = load_checkpoint(&args.checkpoint)?;
    let dataset = Dataset::load(&args.data)?;
    let record = dataset
        .records
        .get(args.sample)
        .with_context(|| format!("dataset has {} records", dataset.records.len()))?;
    let image = dataset.load_image(record.image)?;
    fs::create_dir_all(&args.out)?;

    let img_out = model.embed_image(&image)?;
    let (grid_h, grid_w) = (model.cfg.backbone.grid_h, model.cfg.backbone.grid_w);
    if let Some(fg) = &img_out.foreground {
        let grid = fg.to_grid(grid_h, grid_w)?;
        write_csv(&args.out.join("foreground.csv"), &grid)?;
        save_heatmap(
            &args.out.join("foreground.png"),
            &grid,
            model.cfg.backbone.image_h / grid_h,
            model.cfg.backbone.image_w / grid_w,
        )?;
    }

    let ids = tokenizer.encode(&record.caption);
    let words: Vec<String> = ids.iter().map(|&i| tokenizer.words()[i].clone()).collect();
    let txt_out = model.embed_text(&ids)?;
    let export = |name: &str, rec: &Option<CrossAttentionRecord>| -> Result<()> {
        let Some(rec) = rec else { return Ok(()) };
        // head-averaged token-over-word attention, valid words only
        let rows: Vec<Vec<f64>> = (0..rec.num_queries())
            .map(|q| {
                (0..words.len())
                    .map(|p| {
                        (0..rec.n_heads()).map(|h| rec.weight(h, q, p)).sum::<f64>()
                            / rec.n_heads() as f64
                    })
                    .collect()
            })
            .collect();
        write_csv(&args.out.join(format!("{name}.csv")), &rows)?;
        save_heatmap(&args.out.join(format!("{name}.png")), &rows, 24, 24)?;
        Ok(())
    };
    export("text_coarse_attention", &txt_out.coarse_record)?;
    export("text_fine_attention", &txt_out.fine_record)?;
    fs::write(args.out.join("words.txt"), words.join("\n"))?;
    println!(
        "attention maps for record {} (identity {}) written to {}",
        args.sample,
        record.identity,
        args.out.display()
    );
    println!("caption: {}", record.caption);
    Ok(())
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut s = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Render a matrix as an upscaled blue-to-red heatmap.
fn save_heatmap(path: &Path, rows: &[Vec<f64>], cell_h: usize, cell_w: usize) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        bail!("empty heatmap");
    }
    let (min, max) = rows.iter().flatten().fold((f64::MAX, f64::MIN), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = (max - min).max(1e-12);
    let (h, w) = (rows.len(), rows[0].len());
    let mut img = image::RgbImage::new((w * cell_w) as u32, (h * cell_h) as u32);
    for (py, px, pixel) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let v = (rows[py as usize / cell_h][px as usize / cell_w] - min) / range;
        *pixel = image::Rgb([
            (255.0 * v) as u8,
            (64.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8,
            (255.0 * (1.0 - v)) as u8,
        ]);
    }
    img.save(path)?;
    Ok(())
}
