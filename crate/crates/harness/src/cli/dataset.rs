use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::Subcommand;
use qask_core::dataset::{
    build_sft_mix, check_published_counts, harvest, judge_generate, partition_pools, sft_record, split_stats,
    stage1_pool, validate_sample, MixRatio, SftRecord, PUBLISHED_COUNT_TOLERANCE,
};
use qask_core::model::{EpisodeResult, ImageRef, TraceSample, TraceSplit};
use qask_core::prompt::{TemplateSet, DEFAULT_TEMPLATE_VERSION};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Cli;
use crate::agents::{AgentConfig, AgentFactory, Role};
use crate::cache::Cache;
use crate::files::{parse_jsonl_lines, read_jsonl, write_json, write_jsonl};
use crate::images::ImageStore;
use crate::run::{load_manifest, Invalid};

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Check sample files line by line; exits 1 on any violation.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Turn run results into samples.
    Harvest {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: TraceSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-split counts and histograms.
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the stats as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Compare split sizes with the published dataset; exits 1 on mismatch.
        #[arg(long)]
        check_published: bool,
    },
    /// Render samples as prompt/completion records.
    SftExport {
        #[arg(required = true)]
        samples: Vec<PathBuf>,
        #[arg(long, default_value = "sft_export.jsonl")]
        out: PathBuf,
        /// question:plain interleave ratio of the mixed stage.
        #[arg(long, default_value_t = MixRatio::default())]
        ratio: MixRatio,
        #[arg(long, env = "QASK_SEED", default_value_t = 0)]
        seed: u64,
        /// Plain samples only, in file order.
        #[arg(long)]
        stage1: bool,
        #[arg(long, default_value = DEFAULT_TEMPLATE_VERSION)]
        template_version: String,
    },
    /// Score observations with a judge model and keep the valid samples.
    Judge {
        /// Judge agent config (a questioner).
        #[arg(long)]
        judge: PathBuf,
        /// JSON lines of {description, observation, category, split}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Base of relative image refs; defaults to the input's directory.
        #[arg(long)]
        image_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeItem {
    pub description: String,
    pub observation: ImageRef,
    pub category: String,
    pub split: TraceSplit,
}

/// `file:line: problem` for every bad line.
pub fn validate_files(files: &[PathBuf]) -> anyhow::Result<(usize, Vec<String>)> {
    let mut checked = 0;
    let mut problems = Vec::new();
    for f in files {
        for (line, parsed) in parse_jsonl_lines::<TraceSample>(f)? {
            checked += 1;
            match parsed {
                Err(e) => problems.push(format!("{}:{line}: not a sample: {e}", f.display())),
                Ok(s) => problems.extend(
                    validate_sample(&s)
                        .into_iter()
                        .map(|p| format!("{}:{line}: {p}", f.display())),
                ),
            }
        }
    }
    Ok((checked, problems))
}

fn read_valid_samples(files: &[PathBuf]) -> anyhow::Result<Vec<TraceSample>> {
    let (_, problems) = validate_files(files)?;
    if !problems.is_empty() {
        return Err(Invalid(problems).into());
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(read_jsonl::<TraceSample>(f)?);
    }
    Ok(out)
}

pub fn sft_export(samples: &[TraceSample], stage1: bool, ratio: MixRatio, seed: u64, templates: &TemplateSet) -> anyhow::Result<Vec<SftRecord>> {
    let ordered = if stage1 {
        stage1_pool(samples)
    } else {
        let (q, p) = partition_pools(samples);
        build_sft_mix(q, p, ratio, seed)?
    };
    ordered
        .iter()
        .map(|s| sft_record(templates, s).map_err(Into::into))
        .collect()
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn execute(cli: &Cli, cmd: &DatasetCmd) -> anyhow::Result<()> {
    match cmd {
        DatasetCmd::Validate { files } => {
            let (checked, problems) = validate_files(files)?;
            for p in &problems {
                println!("{p}");
            }
            if problems.is_empty() {
                println!("{checked} samples ok");
                Ok(())
            } else {
                Err(Invalid(vec![format!("{} violation(s) in {checked} samples", problems.len())]).into())
            }
        }
        DatasetCmd::Harvest {
            results,
            manifest,
            split,
            out,
        } => {
            let results: Vec<EpisodeResult> = read_jsonl(results)?;
            let specs = load_manifest(manifest)?;
            let h = harvest(&results, &specs, *split);
            for id in &h.unknown_episodes {
                log::warn!("result for unknown episode `{id}` skipped");
            }
            write_jsonl(out, &h.samples)?;
            println!(
                "{} samples written to {} ({} unparseable turns skipped)",
                h.samples.len(),
                out.display(),
                h.skipped
            );
            Ok(())
        }
        DatasetCmd::Stats {
            files,
            json,
            check_published,
        } => {
            let samples = read_valid_samples(files)?;
            let stats = split_stats(&samples);
            println!("{}", serde_json::to_string_pretty(&stats)?);
            if let Some(p) = json {
                write_json(p, &stats)?;
            }
            if *check_published {
                let off = check_published_counts(&stats, PUBLISHED_COUNT_TOLERANCE);
                if !off.is_empty() {
                    return Err(Invalid(off).into());
                }
                println!("split sizes match the published dataset");
            }
            Ok(())
        }
        DatasetCmd::SftExport {
            samples,
            out,
            ratio,
            seed,
            stage1,
            template_version,
        } => {
            let samples = read_valid_samples(samples)?;
            let templates = TemplateSet::builtin(template_version).map_err(|e| Invalid(vec![e.to_string()]))?;
            let records = sft_export(&samples, *stage1, *ratio, *seed, &templates)?;
            write_jsonl(out, &records)?;
            println!("{} records written to {}", records.len(), out.display());
            Ok(())
        }
        DatasetCmd::Judge {
            judge,
            input,
            out,
            concurrency,
            image_dir,
        } => {
            let cfg = AgentConfig::load(judge).map_err(|e| Invalid(vec![format!("{e:#}")]))?;
            let problems = cfg.problems(Role::Questioner);
            if !problems.is_empty() || *concurrency == 0 {
                let mut p = problems;
                if *concurrency == 0 {
                    p.push("--concurrency must be at least 1".into());
                }
                return Err(Invalid(p).into());
            }
            let items: Vec<JudgeItem> = read_jsonl(input).map_err(|e| Invalid(vec![format!("{e:#}")]))?;
            let images = ImageStore::new(image_dir.clone().unwrap_or_else(|| parent_dir(input)));
            let cache = match &cli.cache_dir {
                Some(d) => Cache::new(d, cli.cache_mode.unwrap_or_default()),
                None => Cache::disabled(),
            };
            let factory = AgentFactory::new(images, Arc::new(cache));
            factory.questioner(&cfg).map_err(|e| Invalid(vec![format!("{e:#}")]))?;
            let pool = rayon::ThreadPoolBuilder::new().num_threads(*concurrency).build()?;
            let outcomes: Vec<_> = pool.install(|| {
                items
                    .par_iter()
                    .map_init(
                        || factory.questioner(&cfg),
                        |judge, item| match judge {
                            Ok(j) => judge_generate(j, &item.description, &item.observation, &item.category, item.split)
                                .map_err(|e| e.to_string()),
                            Err(e) => Err(format!("{e:#}")),
                        },
                    )
                    .collect()
            });
            let mut kept = Vec::new();
            for (item, o) in items.iter().zip(outcomes) {
                match o {
                    Ok(s) => kept.push(s),
                    Err(e) => log::warn!("{}: {e}", item.observation),
                }
            }
            write_jsonl(out, &kept).with_context(|| format!("writing {}", out.display()))?;
            println!("{} of {} items kept, written to {}", kept.len(), items.len(), out.display());
            Ok(())
        }
    }
}
