use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use svasp::config::{TrainConfig, Variant};
use svasp::data::{read_cache, write_cache, LabeledImages, Manifest};
use svasp::diagnostics::{cosine_csv, flatness_score, landscape_csv, write_csv};
use svasp::gradcheck;
use svasp::io::{load_checkpoint, save_checkpoint, write_atomic};
use svasp::pipeline::{self, Datasets};

#[derive(Parser)]
#[command(name = "svasp", about = "Adversarial style perturbation for cross-domain few-shot learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source and target caches.
    GenData(Common),
    /// Meta-train one variant.
    Train(Common),
    /// Few-shot evaluation of a trained checkpoint on every target.
    Eval(Common),
    /// Loss landscape and flatness of a trained checkpoint.
    Diagnose(Common),
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = gradcheck::DEFAULT_CASES)]
        cases: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> svasp::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        let variant = self.variant.unwrap_or(cfg.variant);
        let cfg = cfg.with_variant(variant);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_dir(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn run_dir(cfg: &TrainConfig) -> PathBuf {
    cfg.out_dir.join(cfg.variant.to_string())
}

fn manifest_for(cfg: &TrainConfig) -> Manifest {
    let mut domains = vec![cfg.source_domain()];
    domains.extend(cfg.target_domains());
    Manifest { seed: cfg.seed, image_size: cfg.image_size, n_per_class: cfg.n_per_class, domains }
}

fn gen_data(cfg: &TrainConfig) -> svasp::Result<Datasets> {
    let ds = pipeline::generate_datasets(cfg)?;
    let dir = data_dir(cfg);
    write_cache(&dir.join(format!("{}.bin", cfg.source_domain().name)), &ds.source)?;
    for (name, t) in &ds.targets {
        write_cache(&dir.join(format!("{name}.bin")), t)?;
    }
    manifest_for(cfg).write(&dir.join("manifest.json"))?;
    info!("wrote {} domains to {}", ds.targets.len() + 1, dir.display());
    Ok(ds)
}

/// Cached data when the manifest matches the config, otherwise regenerate.
fn load_data(cfg: &TrainConfig) -> svasp::Result<Datasets> {
    let dir = data_dir(cfg);
    match Manifest::read(&dir.join("manifest.json")) {
        Ok(m) if m == manifest_for(cfg) => {
            let read = |name: &str| -> svasp::Result<LabeledImages> { read_cache(&dir.join(format!("{name}.bin"))) };
            let source = read(&m.domains[0].name)?;
            let targets = m.domains[1..].iter().map(|d| Ok((d.name.clone(), read(&d.name)?))).collect::<svasp::Result<Vec<_>>>()?;
            Ok(Datasets { source, targets })
        }
        _ => gen_data(cfg),
    }
}

fn checkpoint(cfg: &TrainConfig) -> PathBuf {
    run_dir(cfg).join("model.ckpt")
}

fn train(cfg: &TrainConfig) -> svasp::Result<()> {
    let ds = load_data(cfg)?;
    let out = pipeline::train_model(cfg, &ds.source)?;
    let dir = run_dir(cfg);
    write_csv(&dir.join("losses.csv"), &pipeline::losses_csv(&out.epochs))?;
    write_csv(&dir.join("cosine.csv"), &cosine_csv(&out.cosines))?;
    write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
    save_checkpoint(&checkpoint(cfg), &out.model)?;
    println!("trained {} for {} epochs; final-10 gradient cosine {:.4}", cfg.variant, cfg.epochs, pipeline::final_cosine(&out.cosines, 10));
    Ok(())
}

fn eval(cfg: &TrainConfig) -> svasp::Result<()> {
    let ds = load_data(cfg)?;
    let model = load_checkpoint(&checkpoint(cfg))?;
    let entries = ds.targets.iter().map(|(name, t)| pipeline::evaluate(&model, cfg, name, t)).collect::<svasp::Result<Vec<_>>>()?;
    for e in &entries {
        println!("{}: {:.4} +- {:.4} over {} episodes", e.domain, e.mean_acc, e.ci95, e.n_episodes);
    }
    write_atomic(&run_dir(cfg).join("eval.json"), pipeline::eval_json(&entries).as_bytes())
}

fn diagnose(cfg: &TrainConfig) -> svasp::Result<()> {
    let ds = load_data(cfg)?;
    let model = load_checkpoint(&checkpoint(cfg))?;
    let grid = pipeline::landscape(&model, cfg, &ds.source)?;
    let score = flatness_score(&grid);
    let dir = run_dir(cfg);
    write_csv(&dir.join("landscape.csv"), &landscape_csv(&grid))?;
    write_csv(
        &dir.join("flatness.csv"),
        &format!("variant,radius,resolution,flatness\n{},{},{},{}\n", cfg.variant, grid.radius, grid.resolution, score),
    )?;
    println!("{} flatness {score:.6}", cfg.variant);
    Ok(())
}

fn gradcheck_cmd(cfg: &TrainConfig, cases: usize) -> svasp::Result<bool> {
    let reports = gradcheck::run_all(cases, cfg.seed)?;
    for r in &reports {
        println!("{:<16} {:>3} cases  max rel err {:.3e}  {}", r.name, r.cases, r.max_rel_err, if r.passed() { "ok" } else { "FAIL" });
    }
    write_csv(&cfg.out_dir.join("gradcheck.csv"), &gradcheck::report_csv(&reports))?;
    Ok(reports.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> svasp::Result<bool> {
    match cli.cmd {
        Cmd::GenData(c) => gen_data(&c.resolve()?).map(|_| true),
        Cmd::Train(c) => train(&c.resolve()?).map(|_| true),
        Cmd::Eval(c) => eval(&c.resolve()?).map(|_| true),
        Cmd::Diagnose(c) => diagnose(&c.resolve()?).map(|_| true),
        Cmd::Gradcheck { common, cases } => gradcheck_cmd(&common.resolve()?, cases),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
