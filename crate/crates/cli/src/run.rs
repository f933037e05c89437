//! Caption every scenario item under every model and style, then score.

use anyhow::{anyhow, Context, Result};
use kvguide::decoding::{generate, GenerationRequest, SecondExpert};
use kvguide::experts::StyleTarget;
use kvguide::metrics::{
    fluency_score, style_match, tac_score, tic_score, CaptionScores, EvalReport, EvalRow,
};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, Model};
use crate::report::{
    emit_report, format_captions, format_trace, named, named_experts, write_file, CaptionRow,
    TraceLine,
};
use crate::scenario::{load_scenario, Item, Scenario};

pub const WORKERS_ENV: &str = "APOLLO_NUM_WORKERS";

pub struct ExperimentOutput {
    pub report: EvalReport,
    pub captions: Vec<CaptionRow>,
    pub trace: Vec<TraceLine>,
}

struct Job<'a> {
    model: Model,
    style: &'a str,
    item: &'a Item,
}

/// Worker count from the environment; unset means rayon's default.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{WORKERS_ENV}=`{v}` is not a count"))?;
            if n == 0 {
                return Err(anyhow!("{WORKERS_ENV} must be at least 1"));
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{WORKERS_ENV}: {e}")),
    }
}

/// Runs the experiment without writing any files.
pub fn run_in_memory(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<ExperimentOutput> {
    let scenario = load_scenario(cfg)?;
    let styles = scenario.styles(&cfg.styles)?;
    let mut jobs = Vec::new();
    for &model in &cfg.models {
        for style in &styles {
            for item in &scenario.items {
                jobs.push(Job { model, style, item });
            }
        }
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    let results: Vec<(CaptionRow, CaptionScores, Vec<TraceLine>)> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_job(cfg, &scenario, job))
            .collect::<Result<_>>()
    })?;

    let mut rows = Vec::new();
    for &model in &cfg.models {
        for style in &styles {
            let mine: Vec<&(CaptionRow, CaptionScores, Vec<TraceLine>)> = results
                .iter()
                .filter(|(c, _, _)| c.model == model.to_string() && &c.style == style)
                .collect();
            let scores: Vec<CaptionScores> = mine.iter().map(|(_, s, _)| s.clone()).collect();
            let captions: Vec<String> = mine.iter().map(|(c, _, _)| c.caption.clone()).collect();
            rows.push(EvalRow::aggregate(
                &model.to_string(),
                style,
                &scores,
                &captions,
            )?);
        }
    }
    let mut captions = Vec::with_capacity(results.len());
    let mut trace = Vec::new();
    for (c, _, t) in results {
        captions.push(c);
        trace.extend(t);
    }
    Ok(ExperimentOutput {
        report: EvalReport { rows },
        captions,
        trace,
    })
}

/// Runs the experiment and writes the configured report, caption and trace files.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let out = run_in_memory(cfg, workers_from_env()?)?;
    if let Some(path) = &cfg.report {
        emit_report(&out.report, path)?;
        let captions = cfg
            .captions
            .clone()
            .unwrap_or_else(|| path.with_extension("captions.csv"));
        write_file(&captions, format_captions(&out.captions)?.as_bytes())?;
    } else if let Some(path) = &cfg.captions {
        write_file(path, format_captions(&out.captions)?.as_bytes())?;
    }
    if let Some(path) = &cfg.trace {
        write_file(path, format_trace(&out.trace)?.as_bytes())?;
    }
    Ok(out)
}

fn run_job(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    job: &Job,
) -> Result<(CaptionRow, CaptionScores, Vec<TraceLine>)> {
    let w = &scenario.world;
    let eos = w.manifest.eos;
    let context = || format!("{} / {} / {}", job.model, job.style, job.item.name);
    let guidance = cfg
        .guidance_for(job.model, job.style)
        .with_context(context)?;
    let decoding = cfg.decoding_for(job.model);
    let target = match &job.item.audio {
        Some(_) => None,
        None => {
            Some(StyleTarget::from_name(job.style, w.manifest.classifier).with_context(context)?)
        }
    };
    let second = match (&job.item.audio, &target) {
        (Some(clip), _) => SecondExpert::Audio {
            aligner: &w.audio_aligner,
            clip: clip.clone(),
        },
        (None, Some(t)) => SecondExpert::Style {
            classifier: &w.classifier,
            target: t.clone(),
        },
        (None, None) => unreachable!("style target resolved above"),
    };
    let request = GenerationRequest {
        prompt: w.prompt_tokens(),
        eos,
        image: job.item.image.clone(),
        second,
    };
    let g =
        generate(&w.decoder, &w.aligner, &request, &guidance, &decoding).with_context(context)?;

    let scores = CaptionScores {
        tic: tic_score(&g.caption, &job.item.image, &w.aligner, eos)?,
        style_match: target
            .as_ref()
            .map(|t| style_match(&g.caption, &w.classifier, t, eos))
            .transpose()?,
        fluency: fluency_score(&w.decoder, &w.prompt_tokens(), &g.caption, eos)?,
        tac: job
            .item
            .audio
            .as_ref()
            .map(|clip| tac_score(&g.caption, clip, &w.audio_aligner, eos))
            .transpose()?,
    };
    let caption = CaptionRow {
        model: job.model.to_string(),
        style: job.style.to_string(),
        item: job.item.name.clone(),
        caption: w.display(&g.caption),
        tic: scores.tic,
        style_match: scores.style_match,
        fluency: scores.fluency,
        tac: scores.tac,
        log_score: g.log_score,
        truncated: g.truncated,
    };
    let name = |t: u32| w.token_name(t).to_string();
    let mut lines = Vec::new();
    for (rank, beam) in g.trace.beams.iter().enumerate() {
        let selected = beam.caption == g.caption;
        for r in &beam.records {
            lines.push(TraceLine {
                model: caption.model.clone(),
                style: caption.style.clone(),
                item: caption.item.clone(),
                beam: rank,
                beam_status: beam.status,
                selected,
                position: r.position,
                chosen: r.chosen,
                chosen_text: name(r.chosen),
                p0: named(&r.p0, name),
                experts: named_experts(&r.experts, name),
                p_final: named(&r.p_final, name),
                losses: r.losses.clone(),
                decentral_losses: r.decentral_losses.clone(),
            });
        }
    }
    Ok((caption, scores, lines))
}
