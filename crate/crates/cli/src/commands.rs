use std::fs;
use std::path::Path;
use std::sync::Arc;

use candle_core::Device;
use sonartrack::checkpoint;
use sonartrack::config::{self, RunConfig};
use sonartrack::evalkit::plots::emit_plots;
use sonartrack::evalkit::{
    evaluate, load_benchmark, read_results, read_summary, run_ope, write_summary, Attribute, OracleTracker,
    PairTracker, Summary,
};
use sonartrack::model::Model;
use sonartrack::synth;
use sonartrack::tracker::NetTracker;
use sonartrack::train::{load_records, Trainer};
use sonartrack::{Error, Result};

use crate::{Cli, Command};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.md";

pub fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    let mut cfg = config::load(cli.profile.as_deref(), cli.config.as_deref(), &overrides)?;
    if cli.deterministic {
        cfg.threads = 1;
    }
    init_threads(cfg.threads);
    let model_pinned = cli.profile.is_some()
        || cli.config.is_some()
        || overrides.iter().any(|(k, _)| config::resolve_alias(k).starts_with("model."));

    match cli.command {
        Command::Datagen { out } => {
            let o = synth::generate(&cfg, &out)?;
            log::info!("benchmark: {}", o.benchmark.display());
            log::info!("sot sequences: {}", o.sot.display());
            log::info!("detection annotations: {}", o.detection_json.display());
            log::info!("preview: {}", o.preview.display());
            Ok(())
        }
        Command::Train { out, data } => {
            if let Some(d) = data {
                cfg.train.sot_root.get_or_insert_with(|| d.join("sot"));
                cfg.train
                    .detection_json
                    .get_or_insert_with(|| d.join("detection").join("annotations.json"));
            }
            let mut trainer = Trainer::new(&cfg, load_records(&cfg)?)?;
            let o = trainer.run(&out)?;
            if let (Some(first), Some(last)) = (o.losses.first(), o.losses.last()) {
                log::info!("loss {:.4} -> {:.4} over {} steps", first.total, last.total, o.losses.len());
            }
            log::info!("checkpoint: {}", o.checkpoint.display());
            Ok(())
        }
        Command::Track {
            dataset,
            out,
            checkpoint: ckpt,
            oracle,
        } => {
            let annotations = load_benchmark(&dataset)?;
            if oracle {
                run_ope(
                    &annotations,
                    |seq| Ok(Box::new(OracleTracker::new(seq)) as Box<dyn PairTracker>),
                    &out,
                )?;
            } else {
                let ckpt = ckpt.ok_or_else(|| Error::config("track needs --checkpoint or --oracle"))?;
                let model = Arc::new(load_model(&cfg, &ckpt, model_pinned)?);
                let tcfg = cfg.tracker.clone();
                run_ope(
                    &annotations,
                    |_| Ok(Box::new(NetTracker::new(model.clone(), tcfg.clone())) as Box<dyn PairTracker>),
                    &out,
                )?;
            }
            log::info!("results: {}", out.display());
            Ok(())
        }
        Command::Eval {
            results,
            dataset,
            out,
            name,
        } => {
            let annotations = load_benchmark(&dataset)?;
            let res = read_results(&results, &annotations)?;
            let name = name.unwrap_or_else(|| {
                results
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "tracker".into())
            });
            let summaries = evaluate(&name, &res, &annotations, &cfg.eval)?;
            fs::create_dir_all(&out)?;
            write_summary(&out.join(SUMMARY_FILE), &summaries)?;
            let table = tables(&summaries);
            fs::write(out.join(TABLE_FILE), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Plot { out, summaries } => {
            let mut all = Vec::new();
            for p in &summaries {
                all.extend(read_summary(p)?);
            }
            for p in emit_plots(&all, &out)? {
                log::info!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn init_threads(threads: usize) {
    if threads == 0 {
        return;
    }
    // candle's CPU kernels size their pools from this variable
    std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::debug!("thread pool already set: {e}");
    }
}

/// With a pinned config (profile, file or `model.*` overrides given) the
/// checkpoint must match it; otherwise the checkpoint's own config is used.
fn load_model(cfg: &RunConfig, path: &Path, pinned: bool) -> Result<Model> {
    let dtype = cfg.train.precision.dtype();
    if pinned {
        let model = Model::new(&cfg.model, cfg.seed, dtype, &Device::Cpu)?;
        checkpoint::load_into(&model, path, None)?;
        Ok(model)
    } else {
        Ok(checkpoint::load(path, dtype, &Device::Cpu)?.0)
    }
}

/// Markdown tables: overall scores, then per-attribute success and precision.
pub fn tables(summaries: &[Summary]) -> String {
    let mut s = String::from("| Tracker | Modality | SR | PR | NPR | Frames |\n|---|---|---|---|---|---|\n");
    for x in summaries {
        s.push_str(&format!(
            "| {} | {} | {:.3} | {:.3} | {:.3} | {} |\n",
            x.tracker, x.modality, x.sr, x.pr, x.npr, x.frames
        ));
    }
    let cols: Vec<&str> = std::iter::once("ALL")
        .chain(Attribute::ALL.iter().map(|a| a.name()))
        .filter(|c| summaries.iter().any(|x| x.per_attribute.contains_key(*c)))
        .collect();
    for (label, pick) in [("SR", 0usize), ("PR", 1)] {
        s.push_str(&format!("\n| Tracker | Modality | {label} by attribute |"));
        for c in &cols {
            s.push_str(&format!(" {c} |"));
        }
        s.push_str("\n|---|---|---|");
        s.push_str(&"---|".repeat(cols.len()));
        s.push('\n');
        for x in summaries {
            s.push_str(&format!("| {} | {} | |", x.tracker, x.modality));
            for c in &cols {
                match x.per_attribute.get(*c) {
                    Some(r) => s.push_str(&format!(" {:.3} |", if pick == 0 { r.sr } else { r.pr })),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
    }
    s
}
