use kvguide::decoding::{
    generate, select_candidates, BeamStatus, DecodingConfig, GenerationRequest, Guide, SecondExpert,
};
use kvguide::experts::StyleTarget;
use kvguide::guidance::{inner_optimize, loss_product, GuidanceConfig, Polarity, Variant};
use kvguide::tensor::{Distribution, TokenId};
use kvguide::zoo::world::{build_synthetic_world, WorldSpec};
use kvguide::zoo::SyntheticWorld;

fn request<'a>(w: &'a SyntheticWorld, image: &str, class: usize) -> GenerationRequest<'a> {
    GenerationRequest {
        prompt: w.prompt_tokens(),
        eos: w.manifest.eos,
        image: w.image(image).unwrap(),
        second: SecondExpert::Style {
            classifier: &w.classifier,
            target: StyleTarget::Class(class),
        },
    }
}

fn unguided() -> GuidanceConfig {
    GuidanceConfig {
        inner_steps: 0,
        ..GuidanceConfig::default()
    }
}

fn greedy(w: &SyntheticWorld, max_len: usize) -> Vec<TokenId> {
    let mut tokens = w.prompt_tokens();
    let mut cache = w.decoder.prefill(&tokens).unwrap();
    let mut out = Vec::new();
    while out.len() < max_len {
        let (p, next) = w.decoder.forward(&tokens, &cache).unwrap();
        cache = next;
        let t = p.argmax_id();
        out.push(t);
        tokens.push(t);
        if t == w.manifest.eos {
            break;
        }
    }
    out
}

#[test]
fn single_beam_without_steps_is_greedy_decoding() {
    for seed in [0, 5, 9] {
        let w = build_synthetic_world(seed, &WorldSpec::style_demo()).unwrap();
        let dec = DecodingConfig {
            beams: 1,
            ..DecodingConfig::default()
        };
        let g = generate(
            &w.decoder,
            &w.aligner,
            &request(&w, "image_1", 1),
            &unguided(),
            &dec,
        )
        .unwrap();
        assert_eq!(g.caption, greedy(&w, dec.max_len));
        assert_eq!(g.caption, w.manifest.unguided_caption);
    }
}

#[test]
fn guidance_steers_toward_the_paired_token() {
    let w = build_synthetic_world(7, &WorldSpec::style_demo()).unwrap();
    let cake = w.token_id("cake").unwrap();
    assert!(!w.manifest.unguided_caption.contains(&cake));
    let cfg = GuidanceConfig::preset(Variant::Product, Polarity::Positive);
    let g = generate(
        &w.decoder,
        &w.aligner,
        &request(&w, "image_7", 1),
        &cfg,
        &DecodingConfig::default(),
    )
    .unwrap();
    assert!(g.caption.contains(&cake), "{}", w.display(&g.caption));
}

#[test]
fn generation_is_deterministic() {
    let w = build_synthetic_world(4, &WorldSpec::style_demo()).unwrap();
    let cfg = GuidanceConfig::preset(Variant::ProductDecentralized, Polarity::Negative);
    let dec = DecodingConfig::default();
    let a = generate(
        &w.decoder,
        &w.aligner,
        &request(&w, "image_2", 0),
        &cfg,
        &dec,
    )
    .unwrap();
    let b = generate(
        &w.decoder,
        &w.aligner,
        &request(&w, "image_2", 0),
        &cfg,
        &dec,
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn beams_respect_their_limits() {
    let w = build_synthetic_world(1, &WorldSpec::style_demo()).unwrap();
    let dec = DecodingConfig {
        beams: 3,
        max_len: 6,
        ..DecodingConfig::default()
    };
    for variant in Variant::ALL {
        let cfg = GuidanceConfig {
            inner_steps: 2,
            ..GuidanceConfig::preset(variant, Polarity::Positive)
        };
        let g = generate(
            &w.decoder,
            &w.aligner,
            &request(&w, "image_4", 1),
            &cfg,
            &dec,
        )
        .unwrap();
        assert!(!g.trace.beams.is_empty() && g.trace.beams.len() <= dec.beams);
        for beam in &g.trace.beams {
            assert!(beam.caption.len() <= dec.max_len);
            assert_eq!(beam.records.len(), beam.caption.len());
            match beam.status {
                BeamStatus::Finished => assert_eq!(beam.caption.last(), Some(&w.manifest.eos)),
                BeamStatus::Truncated => assert_eq!(beam.caption.len(), dec.max_len),
                BeamStatus::Active => panic!("active beam after search"),
            }
            for (pos, record) in beam.records.iter().enumerate() {
                assert_eq!(record.position, pos);
                assert_eq!(record.chosen, beam.caption[pos]);
                assert_eq!(record.losses.len(), cfg.inner_steps + 1);
                assert_eq!(
                    !record.decentral_losses.is_empty(),
                    variant == Variant::ProductDecentralized
                );
            }
            // Every prefix is the extension of a surviving prefix one step earlier.
            let mut log_score = 0.0;
            for (pos, record) in beam.records.iter().enumerate() {
                let p = record
                    .p_final
                    .iter()
                    .find(|e| e.token == beam.caption[pos])
                    .map(|e| e.prob);
                if let Some(p) = p {
                    log_score += p.ln();
                }
            }
            assert!(log_score <= 0.0 && beam.log_score <= 0.0);
        }
        if g.truncated {
            assert!(g
                .trace
                .beams
                .iter()
                .all(|b| b.status != BeamStatus::Finished));
        } else {
            assert_eq!(g.caption.last(), Some(&w.manifest.eos));
        }
    }
}

#[test]
fn expansion_keeps_cache_and_tokens_aligned() {
    let w = build_synthetic_world(2, &WorldSpec::style_demo()).unwrap();
    let req = request(&w, "image_5", 1);
    let cfg = GuidanceConfig::default();
    let dec = DecodingConfig::default();
    let guide = Guide::new(&w.decoder, &w.aligner, &req, &cfg, &dec).unwrap();
    let mut tokens = req.prompt.clone();
    let mut cache = w.decoder.prefill(&tokens).unwrap();
    for _ in 0..4 {
        assert_eq!(cache.prefix_len() + 1, tokens.len());
        let e = guide.expand(&tokens, &cache).unwrap();
        assert_eq!(e.cache.prefix_len(), tokens.len());
        assert_eq!(e.successors.len(), dec.beams);
        tokens.push(e.successors[0].0);
        cache = e.cache;
    }
    assert!(guide
        .expand(&tokens[..1], &w.decoder.empty_cache())
        .is_err());
}

#[test]
fn single_beam_result_equals_the_per_step_argmax() {
    let w = build_synthetic_world(3, &WorldSpec::style_demo()).unwrap();
    let req = request(&w, "image_8", 1);
    let cfg = GuidanceConfig::preset(Variant::Sum, Polarity::Positive);
    let dec = DecodingConfig {
        beams: 1,
        max_len: 5,
        ..DecodingConfig::default()
    };
    let g = generate(&w.decoder, &w.aligner, &req, &cfg, &dec).unwrap();
    let guide = Guide::new(&w.decoder, &w.aligner, &req, &cfg, &dec).unwrap();
    let mut tokens = req.prompt.clone();
    let mut cache = w.decoder.prefill(&tokens).unwrap();
    let mut caption = Vec::new();
    while caption.len() < dec.max_len {
        let e = guide.expand(&tokens, &cache).unwrap();
        let t = e.successors[0].0;
        caption.push(t);
        tokens.push(t);
        cache = e.cache;
        if t == w.manifest.eos {
            break;
        }
    }
    assert_eq!(g.caption, caption);
}

#[test]
fn one_hot_expert_pulls_the_argmax() {
    let w = build_synthetic_world(0, &WorldSpec::style_demo()).unwrap();
    let tokens = w.prompt_tokens();
    let cache = w.decoder.prefill(&tokens).unwrap();
    let (p, _) = w.decoder.forward(&tokens, &cache).unwrap();
    let (batch, p0) = select_candidates(&p, 16, vec![]).unwrap();
    let cfg = GuidanceConfig {
        lambda_lm: 0.0,
        lambda_cl: 1.0,
        inner_steps: 30,
        ..GuidanceConfig::default()
    };
    for j in [batch.len() - 1, batch.len() / 2] {
        let mut onehot = vec![0.0; batch.len()];
        onehot[j] = 1.0;
        let expert = Distribution::new(batch.candidates().to_vec(), onehot).unwrap();
        let terms = loss_product(&p0, &[&expert], &cfg).unwrap();
        assert_ne!(p0.argmax(), j);
        let out = inner_optimize(&w.decoder, &tokens, &cache, &p0, &terms, &cfg).unwrap();
        assert_eq!(out.p_final.argmax(), j, "losses {:?}", out.losses);
        assert!(
            out.losses
                .iter()
                .skip(1)
                .cloned()
                .fold(f64::INFINITY, f64::min)
                < out.losses[0]
        );
    }
}

#[test]
fn zero_steps_keep_the_prior() {
    let w = build_synthetic_world(0, &WorldSpec::style_demo()).unwrap();
    let tokens = w.prompt_tokens();
    let cache = w.decoder.prefill(&tokens).unwrap();
    let (p, extended) = w.decoder.forward(&tokens, &cache).unwrap();
    let (_, p0) = select_candidates(&p, 16, vec![]).unwrap();
    let terms = loss_product(&p0, &[&p0], &unguided()).unwrap();
    let out = inner_optimize(&w.decoder, &tokens, &cache, &p0, &terms, &unguided()).unwrap();
    assert_eq!(out.p_final, p0);
    assert_eq!(out.cache, extended);
    assert_eq!(out.losses.len(), 1);
}

#[test]
fn experts_that_agree_with_the_prior_change_nothing() {
    // Normalized steps ignore the loss scale, so only a zero gradient keeps
    // the cache fixed; agreeing experts give exactly that.
    let w = build_synthetic_world(6, &WorldSpec::style_demo()).unwrap();
    let mut tokens = w.prompt_tokens();
    let mut cache = w.decoder.prefill(&tokens).unwrap();
    let cfg = GuidanceConfig {
        lambda_lm: 1e3,
        ..GuidanceConfig::default()
    };
    for &t in w.manifest.unguided_caption.iter().take(5) {
        let (p, extended) = w.decoder.forward(&tokens, &cache).unwrap();
        let (_, p0) = select_candidates(&p, 16, vec![]).unwrap();
        let terms = loss_product(&p0, &[&p0], &cfg).unwrap();
        let out = inner_optimize(&w.decoder, &tokens, &cache, &p0, &terms, &cfg).unwrap();
        assert_eq!(out.p_final.argmax_id(), t);
        assert!(out.cache.l2_distance(&extended) < 1e-6);
        tokens.push(t);
        cache = extended;
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let w = build_synthetic_world(0, &WorldSpec::style_demo()).unwrap();
    let req = request(&w, "image_0", 1);
    for dec in [
        DecodingConfig {
            beams: 0,
            ..DecodingConfig::default()
        },
        DecodingConfig {
            max_len: 0,
            ..DecodingConfig::default()
        },
        DecodingConfig {
            top_k: 0,
            ..DecodingConfig::default()
        },
        DecodingConfig {
            top_k: 10_000,
            ..DecodingConfig::default()
        },
        DecodingConfig {
            context_layers: Some(vec![7]),
            ..DecodingConfig::default()
        },
    ] {
        assert!(generate(
            &w.decoder,
            &w.aligner,
            &req,
            &GuidanceConfig::default(),
            &dec
        )
        .is_err());
    }
}
