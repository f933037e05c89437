//! Acceptance suite. Each test prints one `ACn PASS|FAIL` line straight to
//! stderr, so the verdicts show up even when output is captured.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use kvguide::decoding::{
    generate, select_candidates, DecodingConfig, GenerationRequest, Guide, SecondExpert,
};
use kvguide::experts::{
    product_of_experts, AlignmentExpert, Expert, ExpertTag, StyleExpert, StyleTarget,
};
use kvguide::guidance::{
    decoder_loss, loss_decentralized, loss_product, loss_sum, optimize_alignment_context, GradNorm,
    GuidanceConfig, LossTerms, Polarity, Variant,
};
use kvguide::metrics::{fluency_from_perplexity, fluency_score, perplexity, tac_score};
use kvguide::tensor::{Distribution, TokenId};
use kvguide::zoo::world::{build_synthetic_world, WorldSpec};
use kvguide::zoo::{CacheGrads, ContextCache, DecoderLm, ModelWeights, SyntheticWorld};
use kvguide_cli::config::{parse_pairs, ExperimentConfig};
use kvguide_cli::{run_experiment, run_in_memory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, pass: bool, detail: &str) {
    let line = format!("{id} {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id}: {detail}");
}

fn style_request<'a>(w: &'a SyntheticWorld, image: &str, style: &str) -> GenerationRequest<'a> {
    GenerationRequest {
        prompt: w.prompt_tokens(),
        eos: w.manifest.eos,
        image: w.image(image).unwrap(),
        second: SecondExpert::Style {
            classifier: &w.classifier,
            target: StyleTarget::from_name(style, w.manifest.classifier).unwrap(),
        },
    }
}

fn unguided_decoding() -> (GuidanceConfig, DecodingConfig) {
    let g = GuidanceConfig {
        inner_steps: 0,
        ..GuidanceConfig::default()
    };
    let d = DecodingConfig {
        beams: 1,
        ..DecodingConfig::default()
    };
    (g, d)
}

// ---- AC1 -------------------------------------------------------------------

/// A random decoder loss graph: a world, a prefix, an image, a style and a variant.
fn loss_graph(
    seed: u64,
    variant: Variant,
) -> (SyntheticWorld, Vec<TokenId>, ContextCache, LossTerms) {
    let w = build_synthetic_world(seed, &WorldSpec::style_demo()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xac1);
    let mut tokens = w.prompt_tokens();
    let prompt_len = tokens.len();
    for _ in 0..rng.random_range(0..5) {
        tokens.push(rng.random_range(2..w.manifest.vocab_size as TokenId));
    }
    let cache = w.decoder.prefill(&tokens).unwrap();
    let (p_full, _) = w.decoder.forward(&tokens, &cache).unwrap();
    let (batch, p0) = select_candidates(
        &p_full,
        rng.random_range(4..=16),
        tokens[prompt_len..].to_vec(),
    )
    .unwrap();
    let polarity = if rng.random_bool(0.5) {
        Polarity::Positive
    } else {
        Polarity::Negative
    };
    let cfg = GuidanceConfig::preset(variant, polarity);
    let image = w.manifest.images[rng.random_range(0..w.manifest.images.len())]
        .name
        .clone();
    let align_expert = AlignmentExpert::new(
        &w.aligner,
        w.image(&image).unwrap(),
        cfg.tau_align(),
        ExpertTag::Alignment,
    )
    .unwrap();
    let align = align_expert.score(&batch).unwrap();
    let style = StyleExpert::new(
        &w.classifier,
        StyleTarget::Class(rng.random_range(0..2)),
        cfg.tau_style().max(0.05),
    )
    .unwrap()
    .score(&batch)
    .unwrap();
    let terms = match variant {
        Variant::Sum => loss_sum(&p0, &align.dist, &style.dist, &cfg).unwrap(),
        Variant::Product => loss_product(&p0, &[&align.dist, &style.dist], &cfg).unwrap(),
        Variant::ProductDecentralized => {
            let out = optimize_alignment_context(
                &w.aligner,
                align_expert.features(),
                align_expert.cache(),
                &batch.sequences(),
                &align,
                &style.dist,
                &cfg,
            )
            .unwrap();
            loss_decentralized(&p0, &out.p_align_style.dist, &style.dist, &cfg).unwrap()
        }
    };
    drop(align_expert);
    (w, tokens, cache, terms)
}

/// `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)` over sampled coordinates of every layer.
fn fd_relative_error(
    cache: &ContextCache,
    grads: &CacheGrads,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&ContextCache) -> f64,
) -> f64 {
    const H: f64 = 1e-5;
    let (mut diff, mut an, mut fd_n) = (0.0f64, 0.0f64, 0.0f64);
    for l in 0..cache.num_layers() {
        let (gk, gv) = grads.layers[l].as_ref().unwrap();
        for (is_value, g) in [(false, gk), (true, gv)] {
            for _ in 0..8 {
                let i = rng.random_range(0..g.len());
                let at = |delta: f64| {
                    let mut c = cache.clone();
                    let t = if is_value {
                        c.values_mut(l)
                    } else {
                        c.keys_mut(l)
                    };
                    t[i] += delta;
                    loss(&c)
                };
                let fd = (at(H) - at(-H)) / (2.0 * H);
                diff += (fd - g[i]).powi(2);
                an += g[i].powi(2);
                fd_n += fd.powi(2);
            }
        }
    }
    diff.sqrt() / an.sqrt().max(fd_n.sqrt()).max(1e-6)
}

#[test]
fn ac1_gradient_fidelity() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut graphs = 0;
    let mut failures = Vec::new();
    for seed in 0..34u64 {
        for variant in Variant::ALL {
            let (w, tokens, cache, terms) = loss_graph(seed, variant);
            let (_, grads) = decoder_loss(&w.decoder, &tokens, &cache, &terms).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
            let err = fd_relative_error(&cache, &grads, &mut rng, |c| {
                decoder_loss(&w.decoder, &tokens, c, &terms).unwrap().0
            });
            worst = worst.max(err);
            if !(err < 1e-4) {
                failures.push(format!("seed {seed} {variant}: {err:e}"));
            }
            graphs += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "AC1",
        graphs >= 100 && failures.is_empty() && elapsed < Duration::from_secs(60),
        &format!("{graphs} graphs, worst relative error {worst:.2e}, {elapsed:.1?} {failures:?}"),
    );
}

// ---- AC2 -------------------------------------------------------------------

/// Count of scenarios whose best inner-loop loss beats the step-0 loss.
fn descending(worlds: &[SyntheticWorld], variant: Variant, alpha_scale: f64) -> usize {
    let mut cfg = GuidanceConfig::preset(variant, Polarity::Positive);
    cfg.alpha_lm *= alpha_scale;
    let dec = DecodingConfig::default();
    (0..20)
        .filter(|&i| {
            let w = &worlds[i % worlds.len()];
            let image =
                &w.manifest.images[(i / worlds.len() * 2 + i % 2) % w.manifest.images.len()].name;
            let style = if i % 3 == 0 { "negative" } else { "positive" };
            let req = style_request(w, image, style);
            let guide = Guide::new(&w.decoder, &w.aligner, &req, &cfg, &dec).unwrap();
            let cache = w.decoder.prefill(&req.prompt).unwrap();
            let losses = guide.expand(&req.prompt, &cache).unwrap().record.losses;
            losses[1..].iter().copied().fold(f64::INFINITY, f64::min) < losses[0]
        })
        .count()
}

#[test]
fn ac2_loss_descent() {
    let start = Instant::now();
    let worlds: Vec<_> = (0..4u64)
        .map(|s| build_synthetic_world(s, &WorldSpec::style_demo()).unwrap())
        .collect();
    let mut pass = true;
    let mut detail = Vec::new();
    for variant in Variant::ALL {
        let full = descending(&worlds, variant, 1.0);
        let small = descending(&worlds, variant, 0.01);
        pass &= full >= 19 && small == 20;
        detail.push(format!(
            "{variant}: {full}/20 default, {small}/20 at alpha/100"
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(
        "AC2",
        pass,
        &format!("{}; {elapsed:.1?}", detail.join("; ")),
    );
}

// ---- AC3 -------------------------------------------------------------------

fn random_dist(rng: &mut ChaCha8Rng, ids: &[TokenId]) -> Distribution {
    let w: Vec<f64> = ids
        .iter()
        .map(|_| rng.random_range(1e-3..1.0f64).powi(3))
        .collect();
    let s: f64 = w.iter().sum();
    Distribution::new(ids.to_vec(), w.into_iter().map(|x| x / s).collect()).unwrap()
}

#[test]
fn ac3_reduction_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..20);
        let ids: Vec<TokenId> = (0..n as TokenId).map(|i| i * 2 + 3).collect();
        let [p, p0, a, s] = [(); 4].map(|_| random_dist(&mut rng, &ids));
        let cfg = GuidanceConfig {
            lambda_lm: rng.random_range(0.0..5.0),
            lambda_cl: rng.random_range(0.0..10.0),
            lambda_sl: 0.0,
            ..GuidanceConfig::default()
        };
        let dec = loss_decentralized(&p0, &a, &s, &cfg)
            .unwrap()
            .evaluate(&p)
            .unwrap();
        let prod2 = loss_product(&p0, &[&a, &s], &cfg)
            .unwrap()
            .evaluate(&p)
            .unwrap();
        let prod1 = loss_product(&p0, &[&a], &cfg)
            .unwrap()
            .evaluate(&p)
            .unwrap();
        let sum = loss_sum(&p0, &a, &s, &cfg).unwrap().evaluate(&p).unwrap();
        worst = worst.max((dec - prod2).abs()).max((prod1 - sum).abs());
    }
    verdict(
        "AC3",
        worst < 1e-9,
        &format!("500 random inputs, worst gap {worst:.2e}"),
    );
}

// ---- AC4 -------------------------------------------------------------------

fn has_marker(caption: &[TokenId], markers: &[TokenId]) -> bool {
    caption.iter().any(|t| markers.contains(t))
}

#[test]
fn ac4_style_steering() {
    let start = Instant::now();
    let guidance = GuidanceConfig::preset(Variant::Product, Polarity::Positive);
    let decoding = DecodingConfig {
        beams: 5,
        top_k: 16,
        ..DecodingConfig::default()
    };
    let (plain_g, plain_d) = unguided_decoding();
    let (mut guided, mut unguided, mut n) = (0usize, 0usize, 0usize);
    for seed in 0..5u64 {
        let w = build_synthetic_world(seed, &WorldSpec::style_demo()).unwrap();
        let markers = &w.style("positive").unwrap().markers;
        for image in &w.manifest.images {
            let req = style_request(&w, &image.name, "positive");
            let g = generate(&w.decoder, &w.aligner, &req, &guidance, &decoding).unwrap();
            let u = generate(&w.decoder, &w.aligner, &req, &plain_g, &plain_d).unwrap();
            guided += has_marker(&g.caption, markers) as usize;
            unguided += has_marker(&u.caption, markers) as usize;
            n += 1;
        }
    }
    let (g, u) = (guided as f64 / n as f64, unguided as f64 / n as f64);
    let elapsed = start.elapsed();
    verdict(
        "AC4",
        n == 50 && g - u >= 0.3 && elapsed < Duration::from_secs(300),
        &format!("marker rate guided {g:.2} vs unguided {u:.2} over {n} captions, {elapsed:.1?}"),
    );
}

// ---- AC5 -------------------------------------------------------------------

#[test]
fn ac5_audio_steering() {
    let w = build_synthetic_world(7, &WorldSpec::audio_demo()).unwrap();
    let guidance = GuidanceConfig::preset(Variant::Product, Polarity::Positive);
    let decoding = DecodingConfig::default();
    let (plain_g, plain_d) = unguided_decoding();
    let (mut tac_g, mut tac_u, mut fluency) = (0.0, 0.0, 0.0);
    let n = w.manifest.images.len() as f64;
    for (image, clip) in w.manifest.images.iter().zip(&w.manifest.audio) {
        let audio = w.audio_clip(&clip.name).unwrap();
        let req = GenerationRequest {
            prompt: w.prompt_tokens(),
            eos: w.manifest.eos,
            image: w.image(&image.name).unwrap(),
            second: SecondExpert::Audio {
                aligner: &w.audio_aligner,
                clip: audio.clone(),
            },
        };
        let g = generate(&w.decoder, &w.aligner, &req, &guidance, &decoding).unwrap();
        let u = generate(&w.decoder, &w.aligner, &req, &plain_g, &plain_d).unwrap();
        tac_g += tac_score(&g.caption, &audio, &w.audio_aligner, w.manifest.eos).unwrap() / n;
        tac_u += tac_score(&u.caption, &audio, &w.audio_aligner, w.manifest.eos).unwrap() / n;
        fluency +=
            fluency_score(&w.decoder, &w.prompt_tokens(), &g.caption, w.manifest.eos).unwrap() / n;
    }
    verdict(
        "AC5",
        tac_g - tac_u >= 0.2 && fluency >= 0.7,
        &format!("TAC guided {tac_g:.3} vs unguided {tac_u:.3}, guided fluency {fluency:.3}"),
    );
}

// ---- AC6 -------------------------------------------------------------------

/// Decentralization CE before and after one step at the first caption position.
fn decentral_step(
    w: &SyntheticWorld,
    req: &GenerationRequest,
    polarity: Polarity,
    norm: GradNorm,
) -> (f64, f64) {
    let mut cfg = GuidanceConfig::preset(Variant::ProductDecentralized, polarity);
    cfg.align_grad_norm = norm;
    assert_eq!((cfg.decentral_steps, cfg.alpha_align), (1, 0.3));
    let dec = DecodingConfig::default();
    let guide = Guide::new(&w.decoder, &w.aligner, req, &cfg, &dec).unwrap();
    let cache = w.decoder.prefill(&req.prompt).unwrap();
    let losses = guide
        .expand(&req.prompt, &cache)
        .unwrap()
        .record
        .decentral_losses;
    (losses[0], losses[1])
}

/// Items whose first decentralization step fails to lower the CE, out of all
/// bundled items.
fn decentral_failures(norm: GradNorm) -> (usize, Vec<String>) {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut record = |label: String, (before, after): (f64, f64)| {
        checked += 1;
        if !(after < before) {
            failures.push(format!("{label}: {before:.3} -> {after:.3}"));
        }
    };
    for spec in [WorldSpec::style_demo(), WorldSpec::emotion_demo()] {
        let w = build_synthetic_world(7, &spec).unwrap();
        for style in &w.manifest.styles {
            let polarity = if style.name == "negative" {
                Polarity::Negative
            } else {
                Polarity::Positive
            };
            for image in &w.manifest.images {
                let req = style_request(&w, &image.name, &style.name);
                record(
                    format!("{}/{}", style.name, image.name),
                    decentral_step(&w, &req, polarity, norm),
                );
            }
        }
    }
    let w = build_synthetic_world(7, &WorldSpec::audio_demo()).unwrap();
    for (image, clip) in w.manifest.images.iter().zip(&w.manifest.audio) {
        let req = GenerationRequest {
            prompt: w.prompt_tokens(),
            eos: w.manifest.eos,
            image: w.image(&image.name).unwrap(),
            second: SecondExpert::Audio {
                aligner: &w.audio_aligner,
                clip: w.audio_clip(&clip.name).unwrap(),
            },
        };
        record(
            format!("audio/{}", image.name),
            decentral_step(&w, &req, Polarity::Positive, norm),
        );
    }
    (checked, failures)
}

#[test]
fn ac6_decentralization_step() {
    let default = GuidanceConfig::default().align_grad_norm;
    let (checked, failures) = decentral_failures(default);
    // The squared-norm aligner step is reported for comparison only.
    let (_, squared) = decentral_failures(GradNorm::Squared);
    verdict(
        "AC6",
        failures.is_empty(),
        &format!(
            "{} of {checked} items lowered the CE with the {default:?} aligner step {failures:?}; squared norm: {} of {checked}",
            checked - failures.len(),
            checked - squared.len()
        ),
    );
}

// ---- AC7 -------------------------------------------------------------------

#[test]
fn ac7_metric_formulas() {
    let mut checks = Vec::new();
    checks.push((
        "fluency(750)",
        (fluency_from_perplexity(750.0) - 0.5).abs() < 1e-12,
    ));
    checks.push(("fluency(1500)", fluency_from_perplexity(1500.0) == 0.0));
    checks.push(("fluency(4000)", fluency_from_perplexity(4000.0) == 0.0));

    let w = build_synthetic_world(0, &WorldSpec::style_demo()).unwrap();
    let mut tensors = w.decoder.weights().tensors().clone();
    for name in ["lm_head", "lm_bias"] {
        tensors
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|x| *x = 0.0);
    }
    let flat =
        DecoderLm::new(ModelWeights::new(w.decoder.config().clone(), tensors).unwrap()).unwrap();
    let v = w.manifest.vocab_size as f64;
    let caption = [7, 30, 11, w.manifest.eos];
    let ppl = perplexity(&flat, &w.prompt_tokens(), &caption, w.manifest.eos).unwrap();
    let f = fluency_score(&flat, &w.prompt_tokens(), &caption, w.manifest.eos).unwrap();
    checks.push((
        "uniform LM",
        (ppl - v).abs() < 1e-9 && (f - (1.0 - v / 1500.0)).abs() < 1e-9,
    ));

    let d = Distribution::new(vec![0, 1], vec![0.9, 0.1]).unwrap();
    let p = product_of_experts(&[&d, &d]).unwrap();
    checks.push((
        "product([.9,.1],[.9,.1])",
        (p.probs()[0] - 0.9878).abs() < 1e-3 && (p.probs()[1] - 0.0122).abs() < 1e-3,
    ));

    let failed: Vec<_> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    verdict(
        "AC7",
        failed.is_empty(),
        &format!(
            "{} checks, product = [{:.4}, {:.4}] {failed:?}",
            checks.len(),
            p.probs()[0],
            p.probs()[1]
        ),
    );
}

// ---- AC8 -------------------------------------------------------------------

#[test]
fn ac8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let text = "seed = 7\nvariant = sum, product, product_decentralized, unguided\nstyle = positive, negative";
        let mut cfg = ExperimentConfig::from_pairs(&parse_pairs(text).unwrap()).unwrap();
        cfg.report = Some(dir.path().join(format!("report{run}.csv")));
        cfg.trace = Some(dir.path().join(format!("trace{run}.jsonl")));
        run_experiment(&cfg).unwrap();
        outputs.push((
            read(cfg.report.as_ref().unwrap()),
            read(cfg.trace.as_ref().unwrap()),
        ));
    }
    let same = outputs[0] == outputs[1];
    verdict(
        "AC8",
        same,
        &format!(
            "report {} bytes, trace {} bytes, identical: {same}",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    );
}

// ---- AC9 -------------------------------------------------------------------

#[test]
fn ac9_config_fidelity() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let expected = [
        ("product_decentralized_positive", 0.14, 0.22, 1.0, 0.0),
        ("product_decentralized_negative", 0.17, 0.61, 2.0, 0.0),
        ("product_positive", 0.01, 4.0, 8.0, 0.0),
        ("product_negative", 0.09, 0.62, 2.0, 0.0),
        ("sum_positive", 0.001, 2.0, 2.2, 9.7),
        ("sum_negative", 0.001, 2.9, 5.0, 11.9),
    ];
    let mut problems = Vec::new();
    for (name, tau, l_lm, l_cl, l_sl) in expected {
        let result =
            ExperimentConfig::from_file(&dir.join(format!("{name}.conf")), &[]).and_then(|cfg| {
                let g = cfg.guidance_for(cfg.models[0], &cfg.styles[0])?;
                if (
                    g.tau,
                    g.lambda_lm,
                    g.lambda_cl,
                    g.lambda_sl,
                    g.decentral_steps,
                ) != (tau, l_lm, l_cl, l_sl, 1)
                {
                    anyhow::bail!("loaded {g:?}");
                }
                run_in_memory(&cfg, None).map(|out| out.report.rows.len())
            });
        match result {
            Ok(1) => {}
            Ok(rows) => problems.push(format!("{name}: {rows} rows")),
            Err(e) => problems.push(format!("{name}: {e:#}")),
        }
    }
    verdict(
        "AC9",
        problems.is_empty(),
        &format!("6 configs loaded and run {problems:?}"),
    );
}
