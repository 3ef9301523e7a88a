//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails or overruns its time budget.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command as Process;
use std::time::{Duration, Instant};

use incontext::backend::{
    Backend, BlockKind, ConceptToken, CrossAttentionRecord, DiffusionSchedule, LatentImage, LayerTag, NoiseSample, ParamSelector,
    TextEmbedding, ToyBackend, ToySpec, TrainableBackend,
};
use incontext::concept::losses::attention_objective;
use incontext::concept::prompt::{build_prompt, CONTEXT_TEMPLATE, DISCOVERY_TEMPLATE, REGION_TEMPLATE};
use incontext::concept::{
    attention_loss, concept_step, context_loss, roi_loss, train_concept, ConceptCheckpoint, SourceSample, TrainingConfig,
};
use incontext::image_io::save_rgb;
use incontext::masking::{save_mask, soften, BinaryMask, Resolution};
use incontext::roi::{
    extract_source_mask, extract_target_mask, learn_target_matcher, ExtractionConfig, RegionConfig, RegionPurpose, RegionToken,
};
use incontext::transfer::{edit_image, guidance_gradient, guidance_step, t_start_warning, EditConfig, GenerationConfig, T_START_WINDOW};
use incontext_cli::config::registry;
use incontext_cli::manifest::{read_manifest, RunStatus};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "loss oracles", limit: secs(5), run: loss_oracles },
        Criterion { id: 2, name: "soft mask law", limit: secs(1), run: soft_mask_law },
        Criterion { id: 3, name: "scheduler round trip", limit: secs(5), run: scheduler_round_trip },
        Criterion { id: 4, name: "finite-difference gradients", limit: secs(30), run: finite_differences },
        Criterion { id: 5, name: "edit preserves outside mask", limit: secs(10), run: edit_preservation },
        Criterion { id: 6, name: "guidance monotonicity", limit: secs(10), run: guidance_monotonicity },
        Criterion { id: 7, name: "concept learning smoke", limit: secs(60), run: training_smoke },
        Criterion { id: 8, name: "planted region extraction", limit: secs(60), run: planted_extraction },
        Criterion { id: 9, name: "cli reproducibility", limit: secs(60), run: cli_reproducibility },
        Criterion { id: 10, name: "default config snapshot", limit: secs(1), run: config_snapshot },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over time budget")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{:>2}] {}: {} ({:.2} s, limit {} s)",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- fixtures

fn gaussian(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    NoiseSample::draw(shape, seed).data
}

fn uniform_image(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
}

fn random_mask(h: usize, w: usize, res: Resolution, rng: &mut ChaCha8Rng) -> BinaryMask {
    let bits = Array2::from_shape_simple_fn((h, w), || rng.random_bool(0.5));
    BinaryMask::from_fn(h, w, res, |i, j| bits[[i, j]])
}

fn random_rect(h: usize, w: usize, min: usize, res: Resolution, rng: &mut ChaCha8Rng) -> BinaryMask {
    let rh = rng.random_range(min..=h / 2 + min);
    let rw = rng.random_range(min..=w / 2 + min);
    let (i0, j0) = (rng.random_range(0..=h - rh), rng.random_range(0..=w - rw));
    BinaryMask::from_fn(h, w, res, |i, j| (i0..i0 + rh).contains(&i) && (j0..j0 + rw).contains(&j))
}

fn toy(seed: u64, side: usize) -> ToyBackend {
    ToyBackend::new(ToySpec {
        seed,
        height: side,
        width: side,
        ..ToySpec::default()
    })
    .unwrap()
}

fn with_token(mut b: ToyBackend, name: &str, word: &str) -> ToyBackend {
    let emb = b.word_embedding(word).unwrap().to_vec();
    b.register_token(ConceptToken::new(name, emb, word).unwrap()).unwrap();
    b
}

fn latent(data: Array3<f64>) -> LatentImage {
    LatentImage::new(data, 1).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Bilinear resampling with half-pixel centers written as a tent kernel.
fn tent_resize(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (ih, iw) = map.dim();
    let src = |o: usize, n_in: usize, n_out: usize| ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
    let tent = |s: f64, i: usize| (1.0 - (s - i as f64).abs()).max(0.0);
    Array2::from_shape_fn((oh, ow), |(oi, oj)| {
        let (sy, sx) = (src(oi, ih, oh), src(oj, iw, ow));
        let mut acc = 0.0;
        for a in 0..ih {
            for b in 0..iw {
                acc += tent(sy, a) * tent(sx, b) * map[[a, b]];
            }
        }
        acc
    })
}

fn oracle_attention(record: &CrossAttentionRecord, slot: usize, mask: &Array2<f64>) -> f64 {
    let (gh, gw) = record
        .maps
        .iter()
        .map(|m| (m.dim().2, m.dim().3))
        .min_by_key(|&(h, w)| h * w)
        .unwrap();
    let mut agg = Array2::<f64>::zeros((gh, gw));
    for m in &record.maps {
        let (heads, _, h, w) = m.dim();
        let mut mean = Array2::<f64>::zeros((h, w));
        for head in 0..heads {
            for i in 0..h {
                for j in 0..w {
                    mean[[i, j]] += m[[head, slot, i, j]] / heads as f64;
                }
            }
        }
        agg = agg + tent_resize(&mean, gh, gw);
    }
    agg /= record.maps.len() as f64;
    let target = tent_resize(mask, gh, gw);
    let mut sum = 0.0;
    for i in 0..gh {
        for j in 0..gw {
            sum += (agg[[i, j]] - target[[i, j]]).powi(2);
        }
    }
    sum / (gh * gw) as f64
}

fn oracle_context(pred: &Array3<f64>, eps: &Array3<f64>, mask: &Array2<f64>, alpha: f64) -> f64 {
    let (c, h, w) = pred.dim();
    let mut sum = 0.0;
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let weight = alpha + (1.0 - alpha) * mask[[i, j]];
                sum += (weight * (pred[[k, i, j]] - eps[[k, i, j]])).powi(2);
            }
        }
    }
    sum / (c * h * w) as f64
}

fn oracle_roi(b: &ToyBackend, x_t: &Array3<f64>, mask: &Array2<f64>, c_star: &TextEmbedding, t: usize, eps: &Array3<f64>) -> f64 {
    let (c, h, w) = x_t.dim();
    let mut masked = x_t.clone();
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                if mask[[i, j]] == 0.0 {
                    masked[[k, i, j]] = 0.0;
                }
            }
        }
    }
    let (pred, _) = b.predict_noise(&latent(masked), c_star, t).unwrap();
    let mut sum = 0.0;
    for (p, e) in pred.data.iter().zip(eps.iter()) {
        sum += (p - e).powi(2);
    }
    sum / (c * h * w) as f64
}

fn random_record(rng: &mut ChaCha8Rng) -> CrossAttentionRecord {
    let tokens = rng.random_range(2..=5);
    let mut maps = Vec::new();
    let mut layer_tags = Vec::new();
    for (l, side) in [4usize, 2, 8].into_iter().take(rng.random_range(1..=3)).enumerate() {
        let heads = rng.random_range(1..=3);
        let logits = Array4::from_shape_simple_fn((heads, tokens, side, side), || rng.random_range(-2.0..2.0));
        let mut probs = logits.mapv(f64::exp);
        for head in 0..heads {
            for i in 0..side {
                for j in 0..side {
                    let z: f64 = (0..tokens).map(|k| probs[[head, k, i, j]]).sum();
                    for k in 0..tokens {
                        probs[[head, k, i, j]] /= z;
                    }
                }
            }
        }
        maps.push(probs);
        layer_tags.push(LayerTag {
            name: format!("up.{l}"),
            block: BlockKind::Up,
        });
    }
    CrossAttentionRecord { maps, layer_tags }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------- criteria

fn loss_oracles() -> Outcome {
    let tol = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut track = |a: f64, b: f64, what: &str, case: usize| -> Result<(), String> {
        worst = worst.max((a - b).abs());
        check(rel_close(a, b, tol), || format!("{what} case {case}: {a} vs oracle {b}"))
    };

    for case in 0..25 {
        let record = random_record(&mut rng);
        let slot = rng.random_range(0..record.maps[0].dim().1);
        let mask = random_mask(8, 8, Resolution::Image, &mut rng);
        let lib = ok(attention_loss(&record, slot, &mask))?.value;
        track(lib, oracle_attention(&record, slot, mask.data()), "attention", case)?;
    }

    for case in 0..25 {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let pred = gaussian((c, h, w), rng.random());
        let eps = gaussian((c, h, w), rng.random());
        let mask = random_mask(h, w, Resolution::Latent, &mut rng);
        let alpha = rng.random::<f64>();
        let soft = ok(soften(&mask, alpha))?;
        let lib = ok(context_loss(pred.view(), eps.view(), &soft))?.value;
        track(lib, oracle_context(&pred, &eps, mask.data(), alpha), "context", case)?;
    }

    for case in 0..20u64 {
        let b = with_token(toy(case, 4), "v*", "ornament");
        let c_star = ok(b.encode_prompt("A photo of [v*]", &[]))?;
        let x_t = gaussian((3, 4, 4), rng.random());
        let eps = gaussian((3, 4, 4), rng.random());
        let mask = random_mask(4, 4, Resolution::Latent, &mut rng);
        let t = rng.random_range(1..=50);
        let lib = ok(roi_loss(&b, &latent(x_t.clone()), &mask, &c_star, t, eps.view()))?;
        track(lib, oracle_roi(&b, &x_t, mask.data(), &c_star, t, &eps), "roi", case as usize)?;
    }

    // Every term of one training step, recomputed from raw backend calls.
    for case in 0..20u64 {
        let b = with_token(toy(100 + case, 6), "v*", "style");
        let image = uniform_image((3, 6, 6), &mut rng);
        let mask = random_rect(6, 6, 1, Resolution::Image, &mut rng);
        let sample = ok(SourceSample::new(image.clone(), mask.clone(), "chair", CONTEXT_TEMPLATE))?;
        let t = rng.random_range(1..=50);
        let eps = NoiseSample::draw((3, 6, 6), rng.random());
        let cfg = TrainingConfig::default();
        let (losses, _) = ok(concept_step(&b, "v*", &sample, None, t, &eps, &cfg, false))?;

        let ab = b.schedule().alpha_bar(t);
        let x_t = Array3::from_shape_fn((3, 6, 6), |idx| ab.sqrt() * image[idx] + (1.0 - ab).sqrt() * eps.data[idx]);
        let c = ok(b.encode_prompt("A chair with [v*] style", &[]))?;
        let c_star = ok(b.encode_prompt("A photo of [v*]", &[]))?;
        let (pred, record) = ok(b.predict_noise(&latent(x_t.clone()), &c, t))?;
        let l_con = oracle_context(&pred.data, &eps.data, mask.data(), 0.5);
        let l_att = oracle_attention(&record, ok(c.slot_of("v*"))?, mask.data());
        let l_roi = oracle_roi(&b, &x_t, mask.data(), &c_star, t, &eps.data);
        let l_tot = l_con + 0.5 * l_att + 0.5 * l_roi;
        let case = case as usize;
        track(losses.l_con, l_con, "step l_con", case)?;
        track(losses.l_att, l_att, "step l_att", case)?;
        track(losses.l_roi, l_roi, "step l_roi", case)?;
        track(losses.l_tot, l_tot, "step l_tot", case)?;
    }
    Ok(format!("90 cases, max abs deviation {worst:.2e} <= {tol:e}"))
}

fn soft_mask_law() -> Outcome {
    let alphas = [0.0, 0.25, 0.5, 1.0];
    let mut checked = 0usize;
    let mut verify = |mask: &BinaryMask| -> Result<(), String> {
        for &alpha in &alphas {
            let soft = ok(soften(mask, alpha))?;
            for (&s, &m) in soft.view().iter().zip(mask.view().iter()) {
                let expected = if m == 1.0 { 1.0 } else { alpha };
                check(s == expected && s == alpha + (1.0 - alpha) * m, || {
                    format!("alpha {alpha}: mask {m} gave {s}, expected {expected}")
                })?;
            }
        }
        checked += 1;
        Ok(())
    };
    for h in 1..=8 {
        for w in 1..=8 {
            let n = h * w;
            if n <= 16 {
                for bits in 0u32..(1 << n) {
                    verify(&BinaryMask::from_fn(h, w, Resolution::Latent, |i, j| bits >> (i * w + j) & 1 == 1))?;
                }
            } else {
                let mut family = vec![
                    BinaryMask::zeros(h, w, Resolution::Latent),
                    BinaryMask::ones(h, w, Resolution::Latent),
                    BinaryMask::from_fn(h, w, Resolution::Latent, |i, j| (i + j) % 2 == 0),
                    BinaryMask::from_fn(h, w, Resolution::Latent, |i, j| (i + j) % 2 == 1),
                ];
                for k in 0..n {
                    family.push(BinaryMask::from_fn(h, w, Resolution::Latent, |i, j| i * w + j == k));
                    family.push(BinaryMask::from_fn(h, w, Resolution::Latent, |i, j| i * w + j != k));
                }
                for m in &family {
                    verify(m)?;
                }
            }
        }
    }
    Ok(format!("{checked} masks x {} alphas, exact equality", alphas.len()))
}

fn scheduler_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut schedules = vec![ok(DiffusionSchedule::scaled_linear(50))?];
    while schedules.len() < 10 {
        let steps = rng.random_range(5..=60);
        let mut ab = vec![1.0];
        for _ in 0..steps {
            let beta = rng.random_range(1e-4..0.05);
            ab.push(ab.last().unwrap() * (1.0 - beta));
        }
        schedules.push(ok(DiffusionSchedule::new(ab))?);
    }
    let mut worst = 0.0f64;
    for (case, s) in schedules.iter().enumerate() {
        let x0 = gaussian((3, 5, 4), 50 + case as u64);
        let eps = gaussian((3, 5, 4), 80 + case as u64);
        check(ok(s.add_noise(x0.view(), eps.view(), 0))? == x0, || format!("case {case}: add_noise at t=0 is not exact"))?;
        let mut x = ok(s.add_noise(x0.view(), eps.view(), s.max_timestep()))?;
        for t in (1..=s.max_timestep()).rev() {
            x = ok(s.denoise_step(x.view(), eps.view(), t))?;
        }
        let err = x.iter().zip(x0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        check(err <= 1e-4, || format!("case {case}: reconstruction error {err:e}"))?;
    }
    Ok(format!("{} schedules, max error {worst:.2e} <= 1e-4, t=0 exact", schedules.len()))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = norm(a.iter().zip(b).map(|(x, y)| x - y));
    diff / norm(a.iter().copied()).max(norm(b.iter().copied())).max(1e-300)
}

fn finite_differences() -> Outcome {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;

    // Guidance: d/dx of the attention objective, read back from a unit step.
    for case in 0..5u64 {
        let b = with_token(toy(200 + case, 4), "v*", "style");
        let c = ok(b.encode_prompt("A chair with [v*] style", &[]))?;
        let slot = ok(c.slot_of("v*"))?;
        let x = gaussian((3, 4, 4), rng.random());
        let mask = random_rect(4, 4, 1, Resolution::Image, &mut rng);
        let t = rng.random_range(1..=50);
        let (_, record) = ok(b.predict_noise(&latent(x.clone()), &c, t))?;
        let target = incontext::concept::losses::attention_target(&record, &mask);
        let objective = |x: &Array3<f64>| -> f64 {
            let (_, r) = b.predict_noise(&latent(x.clone()), &c, t).unwrap();
            attention_objective(&r, slot, &target).unwrap().value
        };
        let stepped = ok(guidance_step(&b, &latent(x.clone()), &c, "v*", t, &mask, 1.0))?;
        let analytic: Vec<f64> = x.iter().zip(stepped.data.iter()).map(|(a, b)| a - b).collect();
        let (_, direct) = ok(guidance_gradient(&b, &latent(x.clone()), &c, slot, t, &target))?;
        let mut fd = Vec::with_capacity(x.len());
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            fd.push((objective(&xp) - objective(&xm)) / (2.0 * h));
        }
        let e = rel_err(&analytic, &fd).max(rel_err(direct.as_slice().unwrap(), &fd));
        worst = worst.max(e);
        check(e <= 1e-4, || format!("guidance case {case}: relative error {e:e}"))?;
    }

    // Concept step: d/d(token embedding) of the total loss.
    for case in 0..5u64 {
        let b = with_token(toy(300 + case, 6), "v*", "style");
        let sample = ok(SourceSample::new(
            uniform_image((3, 6, 6), &mut rng),
            random_rect(6, 6, 2, Resolution::Image, &mut rng),
            "chair",
            CONTEXT_TEMPLATE,
        ))?;
        let t = rng.random_range(1..=50);
        let eps = NoiseSample::draw((3, 6, 6), rng.random());
        let cfg = TrainingConfig::default();
        let (_, grads) = ok(concept_step(&b, "v*", &sample, None, t, &eps, &cfg, true))?;
        let analytic = grads.expect("gradients requested").token.to_vec();
        let loss_with = |k: usize, delta: f64| -> f64 {
            let mut p = b.clone();
            p.token_mut("v*").unwrap().embedding[k] += delta;
            concept_step(&p, "v*", &sample, None, t, &eps, &cfg, false).unwrap().0.l_tot
        };
        let fd: Vec<f64> = (0..analytic.len()).map(|k| (loss_with(k, h) - loss_with(k, -h)) / (2.0 * h)).collect();
        let e = rel_err(&analytic, &fd);
        worst = worst.max(e);
        check(e <= 1e-4, || format!("token case {case}: relative error {e:e}"))?;
    }
    Ok(format!("10 cases, max relative error {worst:.2e} <= 1e-4"))
}

fn edit_preservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prompt = "A chair with [v*] style";
    for seed in 0..10u64 {
        let b = with_token(toy(seed, 8), "v*", "style");
        let image = uniform_image((3, 8, 8), &mut rng);
        let mask = random_rect(8, 8, 2, Resolution::Image, &mut rng);
        let cfg = EditConfig { seed, ..EditConfig::default() };
        let out = ok(edit_image(&b, image.view(), &mask, prompt, "v*", &cfg))?;
        let x_tg = ok(b.encode_image(image.view()))?;
        for ((k, i, j), v) in out.latent.data.indexed_iter() {
            if mask.view()[[i, j]] == 0.0 {
                check(v.to_bits() == x_tg.data[[k, i, j]].to_bits(), || format!("seed {seed}: latent changed at {:?}", (k, i, j)))?;
            }
        }
        let none = ok(edit_image(&b, image.view(), &BinaryMask::zeros(8, 8, Resolution::Image), prompt, "v*", &cfg))?;
        check(none.latent == x_tg, || format!("seed {seed}: empty-mask latent differs"))?;
        check(none.image == ok(b.decode_latent(&x_tg))?, || format!("seed {seed}: empty-mask image differs"))?;
    }
    Ok("10 seeds bit-exact outside the mask, empty mask is the identity".into())
}

fn planted_editor(seed: u64, gain: f64, query_scale: f64) -> Result<(ToyBackend, Array3<f64>, BinaryMask), String> {
    let mut b = with_token(toy(seed, 16), "v*", "style");
    let c = ok(b.encode_prompt("red [v*] chair", &[]))?;
    let slot = ok(c.slot_of("v*"))?;
    let region = BinaryMask::from_fn(16, 16, Resolution::Latent, |i, j| i < 8 && j >= 8);
    ok(b.plant_attention(&c, slot, &region, gain, query_scale))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = uniform_image((3, 16, 16), &mut rng);
    let mask = BinaryMask::from_fn(16, 16, Resolution::Image, |i, j| (4..12).contains(&i) && (4..12).contains(&j));
    Ok((b, image, mask))
}

fn guidance_monotonicity() -> Outcome {
    let etas = [0.0, 0.01, 0.1];
    let mut cases = 0;
    let mut drops = Vec::new();
    for seed in 0..5u64 {
        for (gain, query_scale) in [(1.0, 1.0), (2.0, 3.0)] {
            let (b, image, mask) = planted_editor(seed, gain, query_scale)?;
            let mut finals = Vec::new();
            for eta in etas {
                let cfg = EditConfig {
                    eta,
                    seed,
                    ..EditConfig::default()
                };
                let out = ok(edit_image(&b, image.view(), &mask, "red [v*] chair", "v*", &cfg))?;
                finals.push(out.final_objective().ok_or("edit ran no steps")?);
            }
            for k in 1..finals.len() {
                check(finals[k] <= finals[k - 1], || {
                    format!("seed {seed} gain {gain}: objective rose from {} to {} between eta {} and {}", finals[k - 1], finals[k], etas[k - 1], etas[k])
                })?;
            }
            check(finals[2] < finals[0], || format!("seed {seed} gain {gain}: guidance had no effect"))?;
            drops.push(1.0 - finals[2] / finals[0]);
            cases += 1;
        }
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    Ok(format!("{cases} planted cases nonincreasing over eta {etas:?}, mean drop {:.2}%", 100.0 * mean_drop))
}

fn smoke_sample(side: usize) -> SourceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let image = uniform_image((3, side, side), &mut rng);
    let mask = BinaryMask::from_fn(side, side, Resolution::Image, |i, j| i >= side / 4 && i < 3 * side / 4 && j < side / 2);
    SourceSample::new(image, mask, "chair", CONTEXT_TEMPLATE).unwrap()
}

fn training_smoke() -> Outcome {
    let base = toy(1, 16);
    let cfg = TrainingConfig {
        steps: 200,
        learning_rate: 1e-2,
        seed: 4,
        ..TrainingConfig::default()
    };
    let out = ok(train_concept(&base, &smoke_sample(16), &cfg))?;
    let (before, after) = (out.initial_eval.l_tot, out.final_eval.l_tot);
    check(after <= 0.5 * before, || format!("eval loss {before:.4} -> {after:.4} is not a 50% reduction"))?;
    let sel = ParamSelector::CrossAttentionKv;
    check(base.frozen_digest(sel) == out.tuned.frozen_digest(sel), || "frozen weights changed".into())?;
    check(base.params() != out.tuned.params(), || "trainable weights did not move".into())?;
    Ok(format!("eval l_tot {before:.4} -> {after:.4} (ratio {:.3}), frozen digest unchanged", after / before))
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.view().iter().zip(b.view().iter()) {
        inter += (x == 1.0 && y == 1.0) as usize;
        union += (x == 1.0 || y == 1.0) as usize;
    }
    inter as f64 / union.max(1) as f64
}

fn planted_region(seed: u64, purpose: RegionPurpose, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let template = match purpose {
        RegionPurpose::TargetMatching => REGION_TEMPLATE,
        RegionPurpose::SourceDiscovery => DISCOVERY_TEMPLATE,
    };
    let mut b = toy(seed, 16);
    let emb = ok(b.word_embedding("ornament"))?.to_vec();
    let token = ok(ConceptToken::new("w*", emb, "ornament"))?;
    ok(b.register_token(token.clone()))?;
    let c = ok(b.encode_prompt(&ok(build_prompt(template, "chair", "w*", None))?, &[]))?;
    let region = random_rect(16, 16, 3, Resolution::Latent, rng);
    ok(b.plant_attention(&c, ok(c.slot_of("w*"))?, &region, 4.0, 1.0))?;
    let rt = RegionToken {
        token,
        trained_for: purpose,
        object_class: "chair".into(),
    };
    let image = uniform_image((3, 16, 16), rng);
    let cfg = ExtractionConfig { seed, ..ExtractionConfig::default() };
    let found = match purpose {
        RegionPurpose::TargetMatching => ok(extract_target_mask(&b, &rt, image.view(), &cfg))?,
        RegionPurpose::SourceDiscovery => ok(extract_source_mask(&b, &rt, image.view(), &cfg))?,
    };
    Ok(iou(&found.mask, &region.with_resolution(Resolution::Image)))
}

fn planted_extraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 1.0f64;
    for seed in 0..5u64 {
        for purpose in [RegionPurpose::TargetMatching, RegionPurpose::SourceDiscovery] {
            let v = planted_region(seed, purpose, &mut rng)?;
            worst = worst.min(v);
            check(v >= 0.9, || format!("seed {seed} {purpose:?}: IoU {v:.3}"))?;
        }
        let b = with_token(toy(seed, 8), "v*", "ornament");
        let sample = smoke_sample(8);
        let cfg = RegionConfig {
            steps: 0,
            seed,
            ..RegionConfig::default()
        };
        let m = ok(learn_target_matcher(&b, "v*", &sample, &cfg))?;
        check(m.region.token.embedding == b.token("v*").unwrap().embedding, || format!("seed {seed}: zero-step w* differs from v*"))?;
    }
    Ok(format!("10 planted extractions, min IoU {worst:.3} >= 0.9; zero-step matcher copies v*"))
}

fn write_fixtures(dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    ok(save_rgb(uniform_image((3, 16, 16), &mut rng).view(), dir.join("src.png")))?;
    ok(save_rgb(uniform_image((3, 16, 16), &mut rng).view(), dir.join("tgt.png")))?;
    let m = BinaryMask::from_fn(16, 16, Resolution::Image, |i, j| (4..12).contains(&i) && j < 8);
    ok(save_mask(&m, dir.join("mask.png")))?;
    let t = BinaryMask::from_fn(16, 16, Resolution::Image, |i, j| (2..10).contains(&i) && (6..14).contains(&j));
    ok(save_mask(&t, dir.join("tmask.png")))
}

fn run_cli(args: &[String]) -> Result<(), String> {
    let out = ok(Process::new(env!("CARGO_BIN_EXE_incontext")).args(args).output())?;
    check(out.status.success(), || {
        format!("`incontext {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn cli_reproducibility() -> Outcome {
    let tmp = ok(tempfile::tempdir())?;
    let d = tmp.path();
    write_fixtures(d)?;
    let p = |name: &str| d.join(name).display().to_string();
    let ckpt = p("a/learn/checkpoint.bin");
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("learn", vec![
            format!("--input.image={}", p("src.png")),
            format!("--input.mask={}", p("mask.png")),
            "--input.object_class=chair".into(),
            "--train.steps=20".into(),
            "--train.learning_rate=0.01".into(),
        ]),
        ("edit", vec![
            format!("--input.checkpoint={ckpt}"),
            format!("--input.image={}", p("tgt.png")),
            format!("--input.mask={}", p("tmask.png")),
        ]),
        ("generate", vec![format!("--input.checkpoint={ckpt}"), "--input.object_class=vase".into()]),
        ("match-mask", vec![
            format!("--input.checkpoint={ckpt}"),
            format!("--input.image={}", p("src.png")),
            format!("--input.mask={}", p("mask.png")),
            format!("--input.target={}", p("tgt.png")),
            "--match.steps=20".into(),
            "--match.learning_rate=0.03".into(),
        ]),
        ("discover-mask", vec![
            format!("--input.images={},{}", p("src.png"), p("tgt.png")),
            "--input.object_class=chair".into(),
            "--match.steps=20".into(),
            "--match.learning_rate=0.01".into(),
        ]),
    ];
    let mut compared = 0;
    for (cmd, flags) in &runs {
        let first = d.join("a").join(cmd);
        let mut args = vec![cmd.to_string(), "--seed=7".into(), format!("--output.dir={}", first.display())];
        args.extend(flags.iter().cloned());
        run_cli(&args)?;
        let second = d.join("b").join(cmd);
        run_cli(&[
            cmd.to_string(),
            "--config".into(),
            first.join("manifest.json").display().to_string(),
            format!("--output.dir={}", second.display()),
        ])?;
        let (ma, mb) = (ok(read_manifest(&first))?, ok(read_manifest(&second))?);
        check(ma.status == RunStatus::Ok && mb.status == RunStatus::Ok, || format!("{cmd}: run not ok"))?;
        check(!ma.artifacts.is_empty() && ma.artifacts == mb.artifacts, || format!("{cmd}: artifact lists differ"))?;
        for rel in ma.artifacts.values() {
            let (a, b) = (ok(fs::read(first.join(rel)))?, ok(fs::read(second.join(rel)))?);
            check(a == b, || format!("{cmd}: {rel} differs on rerun"))?;
            compared += 1;
        }
        let mut ca = ma.config.clone();
        let mut cb = mb.config.clone();
        ca.remove("output.dir");
        cb.remove("output.dir");
        check(ca == cb, || format!("{cmd}: resolved config differs on rerun"))?;
    }

    let bytes = ok(fs::read(&ckpt))?;
    let loaded = ok(ConceptCheckpoint::load(Path::new(&ckpt)))?;
    check(ok(loaded.to_bytes())? == bytes, || "checkpoint re-encoding is not byte-identical".into())?;
    let copy = d.join("copy.bin");
    ok(loaded.save(&copy))?;
    check(ok(ConceptCheckpoint::load(&copy))? == loaded, || "checkpoint save/load changed the value".into())?;
    let (base, tuned) = ok(loaded.toy_backends())?;
    let (_, tuned_again) = ok(ok(ConceptCheckpoint::load(&copy))?.toy_backends())?;
    check(tuned.params() == tuned_again.params() && tuned.token("v*") == tuned_again.token("v*"), || {
        "re-applied checkpoints disagree".into()
    })?;
    let gen = GenerationConfig {
        object_class: "vase".into(),
        seed: 3,
        ..GenerationConfig::default()
    };
    let g1 = ok(incontext::transfer::generate_with_concept(&base, &tuned, "v*", &gen))?;
    let g2 = ok(incontext::transfer::generate_with_concept(&base, &tuned_again, "v*", &gen))?;
    check(g1 == g2, || "re-applied checkpoints generate differently".into())?;
    Ok(format!("5 commands rerun from their manifests, {compared} artifacts byte-identical; checkpoint round trip lossless"))
}

fn config_snapshot() -> Outcome {
    let t = TrainingConfig::default();
    let e = EditConfig::default();
    let g = GenerationConfig::default();
    let spec = ToySpec::default();
    let expected: BTreeMap<&str, String> = [
        ("alpha", "0.5"),
        ("lambda_att", "0.5"),
        ("lambda_roi", "0.5"),
        ("steps", "500"),
        ("learning_rate", "0.00001"),
        ("T", "50"),
        ("t_s", "5"),
        ("t_start", "10"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_string()))
    .collect();
    let actual: BTreeMap<&str, String> = [
        ("alpha", t.alpha.to_string()),
        ("lambda_att", t.lambda_att.to_string()),
        ("lambda_roi", t.lambda_roi.to_string()),
        ("steps", t.steps.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("T", spec.timesteps.to_string()),
        ("t_s", g.t_s.to_string()),
        ("t_start", e.t_start.to_string()),
    ]
    .into_iter()
    .collect();
    check(actual == expected, || format!("core defaults {actual:?}"))?;

    let reg = registry();
    let default_of = |key: &str| -> String {
        let raw = reg.iter().find(|k| k.name == key).and_then(|k| k.default.clone()).unwrap_or_default();
        raw.parse::<f64>().map(|v| v.to_string()).unwrap_or(raw)
    };
    let resolved = [
        ("alpha", default_of("train.alpha")),
        ("lambda_att", default_of("train.lambda_att")),
        ("lambda_roi", default_of("train.lambda_roi")),
        ("steps", default_of("train.steps")),
        ("learning_rate", default_of("train.learning_rate")),
        ("T", default_of("backend.timesteps")),
        ("t_s", default_of("generate.t_s")),
        ("t_start", default_of("edit.t_start")),
    ]
    .into_iter()
    .collect::<BTreeMap<_, _>>();
    check(resolved == expected, || format!("cli defaults {resolved:?}"))?;
    check(ok(DiffusionSchedule::scaled_linear(spec.timesteps))?.max_timestep() == 50, || "schedule length".into())?;

    check(T_START_WINDOW == (5..=15), || format!("window {T_START_WINDOW:?}"))?;
    for t_start in 0..=50 {
        let warned = t_start_warning(t_start).is_some();
        check(warned != T_START_WINDOW.contains(&t_start), || format!("t_start {t_start}: warning {warned}"))?;
    }
    Ok("alpha 0.5, lambdas 0.5, 500 steps, lr 1e-5, T 50, t_s 5, t_start 10; warnings exactly outside 5..=15".into())
}
