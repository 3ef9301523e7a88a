use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use incontext::backend::{BackendKind, ParamSelector, ToyBackend, ToySpec};
use incontext::concept::{
    build_prompt, loss_trace_csv, train_concept, AugmentationConfig, ConceptCheckpoint, OptimizerKind, SourceSample,
    TrainingConfig,
};
use incontext::image_io::{encode_png, load_rgb};
use incontext::masking::{encode_mask_png, load_mask};
use incontext::roi::{
    extract_source_mask, extract_target_mask, learn_common_concept_token, learn_target_matcher, ExtractionConfig,
    RegionConfig,
};
use incontext::seed::{derive_seed, SPLIT_RULE};
use incontext::transfer::{edit_image, generate_with_concept, t_start_warning, BlendMode, EditConfig, GenerationConfig};
use serde_json::json;

use crate::config::{read_config_file, parse_flags, Command, RunConfig};
use crate::manifest::{file_digest, write_manifest, OutputDir, RunManifest, RunStatus};
use crate::{CliError, RunReport};

/// Streams derived from the master seed, recorded in every manifest.
const SEED_STREAMS: [&str; 6] = ["train", "edit", "generate", "match", "extract", "discover"];

/// Builds the configuration from an optional file plus overrides and runs it.
pub fn execute(command: Command, config_file: Option<&Path>, overrides: &[String]) -> Result<RunReport, CliError> {
    let file_values = match config_file {
        Some(p) => read_config_file(p, command)?,
        None => BTreeMap::new(),
    };
    let flags = parse_flags(overrides)?;
    let cfg = RunConfig::build(command, file_values, &flags)?;
    run(&cfg)
}

/// Runs a validated configuration and writes its manifest.
pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let root = cfg.path("output.dir").expect("validated");
    let out = OutputDir::prepare(&root)?;
    let master = cfg.uint("seed");
    let mut manifest = RunManifest {
        tool: "incontext".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cfg.command,
        status: RunStatus::Ok,
        error: None,
        config: cfg.values.clone(),
        seed_rule: SPLIT_RULE.into(),
        derived_seeds: SEED_STREAMS.iter().map(|s| (s.to_string(), derive_seed(master, s))).collect(),
        input_digests: BTreeMap::new(),
        artifacts: BTreeMap::new(),
        summary: serde_json::Value::Null,
        wall_clock_seconds: 0.0,
    };
    let result = input_digests(cfg).and_then(|digests| {
        manifest.input_digests = digests;
        let produced = match cfg.command {
            Command::Learn => run_learn(cfg, &out),
            Command::Edit => run_edit(cfg, &out),
            Command::Generate => run_generate(cfg, &out),
            Command::MatchMask => run_match(cfg, &out),
            Command::DiscoverMask => run_discover(cfg, &out),
        }?;
        out.commit()?;
        Ok(produced)
    });
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    match result {
        Ok(produced) => {
            manifest.artifacts = produced.artifacts;
            manifest.summary = produced.summary;
            write_manifest(&root, &manifest)?;
            Ok(RunReport {
                output_dir: root,
                manifest,
            })
        }
        Err(e) => {
            out.abort();
            manifest.status = RunStatus::Failed;
            manifest.error = Some(format!("{}: {e}", cfg.command));
            write_manifest(&root, &manifest)?;
            Err(e)
        }
    }
}

struct Produced {
    artifacts: BTreeMap<String, String>,
    summary: serde_json::Value,
}

impl Produced {
    fn new(summary: serde_json::Value) -> Self {
        Self {
            artifacts: BTreeMap::new(),
            summary,
        }
    }

    fn put(&mut self, out: &OutputDir, name: &str, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        out.write(rel, bytes)?;
        self.artifacts.insert(name.into(), rel.into());
        Ok(())
    }
}

fn input_digests(cfg: &RunConfig) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for key in ["input.image", "input.mask", "input.target", "input.checkpoint", "backend.weights"] {
        if let Some(p) = cfg.path(key) {
            out.insert(key.to_string(), file_digest(&p)?);
        }
    }
    for (i, p) in cfg.path_list("input.images").iter().enumerate() {
        out.insert(format!("input.images[{i}]"), file_digest(p)?);
    }
    Ok(out)
}

fn pretty(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s.into_bytes()
}

fn require_toy(kind: BackendKind) -> Result<(), CliError> {
    match kind {
        BackendKind::Toy => Ok(()),
        BackendKind::External => Err(incontext::Error::BackendUnavailable(
            "no external diffusion backend is built into this binary; use backend.kind = \"toy\"".into(),
        )
        .into()),
    }
}

fn configured_backend(cfg: &RunConfig) -> Result<ToyBackend, CliError> {
    if cfg.text("backend.kind") == Some("external") {
        require_toy(BackendKind::External)?;
    }
    let spec = ToySpec {
        seed: cfg.uint("backend.seed"),
        channels: cfg.usize("backend.channels")?,
        height: cfg.usize("backend.height")?,
        width: cfg.usize("backend.width")?,
        embed_dim: cfg.usize("backend.embed_dim")?,
        num_heads: cfg.usize("backend.num_heads")?,
        timesteps: cfg.usize("backend.timesteps")?,
    };
    Ok(ToyBackend::new(spec)?)
}

/// Base and tuned backends rebuilt from the checkpoint's own descriptor.
fn checkpoint_backends(cfg: &RunConfig) -> Result<(ConceptCheckpoint, ToyBackend, ToyBackend), CliError> {
    if cfg.text("backend.kind") == Some("external") {
        require_toy(BackendKind::External)?;
    }
    let ckpt = ConceptCheckpoint::load(&cfg.path("input.checkpoint").expect("validated"))?;
    require_toy(ckpt.manifest.backend.kind)?;
    let (base, tuned) = ckpt.toy_backends()?;
    Ok((ckpt, base, tuned))
}

fn augmentation(cfg: &RunConfig) -> AugmentationConfig {
    AugmentationConfig {
        p_hflip: cfg.float("augment.p_hflip"),
        p_grayscale: cfg.float("augment.p_grayscale"),
        p_zoom: cfg.float("augment.p_zoom"),
        zoom_min: cfg.float("augment.zoom_min"),
        zoom_max: cfg.float("augment.zoom_max"),
        p_jitter: cfg.float("augment.p_jitter"),
        brightness: cfg.float("augment.brightness"),
        contrast: cfg.float("augment.contrast"),
        saturation: cfg.float("augment.saturation"),
    }
}

fn training_config(cfg: &RunConfig) -> Result<TrainingConfig, CliError> {
    Ok(TrainingConfig {
        steps: cfg.usize("train.steps")?,
        learning_rate: cfg.float("train.learning_rate"),
        lambda_att: cfg.float("train.lambda_att"),
        lambda_roi: cfg.float("train.lambda_roi"),
        alpha: cfg.float("train.alpha"),
        seed: derive_seed(cfg.uint("seed"), "train"),
        augmentation: augmentation(cfg),
        optimizer: OptimizerKind::Adam,
        init_word: cfg.text("train.init_word").unwrap_or_default().to_string(),
        token_name: cfg.text("train.token").unwrap_or_default().to_string(),
        trainable: ParamSelector::CrossAttentionKv,
        eval_draws: cfg.usize("train.eval_draws")?,
    })
}

fn region_config(cfg: &RunConfig, stream: &str) -> Result<RegionConfig, CliError> {
    Ok(RegionConfig {
        steps: cfg.usize("match.steps")?,
        learning_rate: cfg.float("match.learning_rate"),
        seed: derive_seed(cfg.uint("seed"), stream),
        token_name: cfg.text("match.token").unwrap_or_default().to_string(),
        init_word: cfg.text("match.init_word").unwrap_or_default().to_string(),
        augmentation: if cfg.flag("match.augment") {
            augmentation(cfg)
        } else {
            AugmentationConfig::disabled()
        },
        eval_draws: cfg.usize("match.eval_draws")?,
    })
}

fn extraction_config(cfg: &RunConfig) -> Result<ExtractionConfig, CliError> {
    let probes = cfg
        .uint_list("extract.probes")
        .into_iter()
        .map(|t| usize::try_from(t).map_err(|_| CliError::Usage("`extract.probes` entry is too large".into())))
        .collect::<Result<_, _>>()?;
    Ok(ExtractionConfig {
        probe_timesteps: probes,
        threshold: cfg.float("extract.threshold"),
        largest_component: cfg.flag("extract.largest_component"),
        seed: derive_seed(cfg.uint("seed"), "extract"),
    })
}

fn object_class(cfg: &RunConfig, ckpt: Option<&ConceptCheckpoint>) -> String {
    cfg.text("input.object_class")
        .map(str::to_string)
        .or_else(|| ckpt.map(|c| c.manifest.object_class.clone()))
        .unwrap_or_default()
}

fn source_sample(cfg: &RunConfig, class: &str) -> Result<SourceSample, CliError> {
    let image = load_rgb(cfg.path("input.image").expect("validated"))?;
    let mask = load_mask(cfg.path("input.mask").expect("validated"))?;
    let template = cfg.text("input.prompt").unwrap_or_default();
    Ok(SourceSample::new(image, mask, class, template)?)
}

fn run_learn(cfg: &RunConfig, out: &OutputDir) -> Result<Produced, CliError> {
    let base = configured_backend(cfg)?;
    let sample = source_sample(cfg, &object_class(cfg, None))?;
    let tcfg = training_config(cfg)?;
    let outcome = train_concept(&base, &sample, &tcfg)?;
    let mut p = Produced::new(json!({
        "initial_eval": outcome.initial_eval,
        "final_eval": outcome.final_eval,
        "steps": tcfg.steps,
    }));
    p.put(out, "checkpoint", "checkpoint.bin", &outcome.checkpoint.to_bytes()?)?;
    p.put(out, "loss_trace", "traces/loss.csv", loss_trace_csv(&outcome.trace).as_bytes())?;
    Ok(p)
}

fn run_edit(cfg: &RunConfig, out: &OutputDir) -> Result<Produced, CliError> {
    let (ckpt, _, tuned) = checkpoint_backends(cfg)?;
    let class = object_class(cfg, Some(&ckpt));
    let token = ckpt.token.name.clone();
    let prompt = build_prompt(cfg.text("input.prompt").unwrap_or_default(), &class, &token, None)?;
    let image = load_rgb(cfg.path("input.image").expect("validated"))?;
    let mask = load_mask(cfg.path("input.mask").expect("validated"))?;
    let ecfg = EditConfig {
        t_start: cfg.usize("edit.t_start")?,
        eta: cfg.float("edit.eta"),
        guidance_iters: cfg.usize("edit.guidance_iters")?,
        blend_mode: match cfg.text("edit.blend_mode") {
            Some("fixed_start") => BlendMode::FixedStart,
            _ => BlendMode::NoiseMatched,
        },
        seed: derive_seed(cfg.uint("seed"), "edit"),
    };
    let outcome = edit_image(&tuned, image.view(), &mask, &prompt, &token, &ecfg)?;
    let steps: Vec<_> = outcome
        .trace
        .iter()
        .map(|s| json!({"t": s.t, "objective_before": s.objective_before, "objective_after": s.objective_after}))
        .collect();
    let warning = t_start_warning(ecfg.t_start);
    let mut p = Produced::new(json!({
        "prompt": prompt,
        "final_objective": outcome.final_objective(),
        "t_start_warning": warning,
    }));
    p.put(out, "image", "images/edited.png", &encode_png(outcome.image.view())?)?;
    p.put(out, "edit_trace", "traces/edit.json", &pretty(&json!({ "prompt": prompt, "steps": steps })))?;
    Ok(p)
}

fn run_generate(cfg: &RunConfig, out: &OutputDir) -> Result<Produced, CliError> {
    let (ckpt, base, tuned) = checkpoint_backends(cfg)?;
    let gcfg = GenerationConfig {
        t_s: cfg.usize("generate.t_s")?,
        object_class: object_class(cfg, Some(&ckpt)),
        seed: derive_seed(cfg.uint("seed"), "generate"),
    };
    let image = generate_with_concept(&base, &tuned, &ckpt.token.name, &gcfg)?;
    let mut p = Produced::new(json!({ "object_class": gcfg.object_class, "t_s": gcfg.t_s }));
    p.put(out, "image", "images/generated.png", &encode_png(image.view())?)?;
    Ok(p)
}

fn run_match(cfg: &RunConfig, out: &OutputDir) -> Result<Produced, CliError> {
    let (ckpt, _, tuned) = checkpoint_backends(cfg)?;
    let sample = source_sample(cfg, &object_class(cfg, Some(&ckpt)))?;
    let rcfg = region_config(cfg, "match")?;
    let ecfg = extraction_config(cfg)?;
    let training = learn_target_matcher(&tuned, &ckpt.token.name, &sample, &rcfg)?;
    let target = load_rgb(cfg.path("input.target").expect("validated"))?;
    let result = extract_target_mask(&training.backend, &training.region, target.view(), &ecfg)?;
    let mut p = Produced::new(json!({
        "confidence": result.confidence,
        "initial_eval": training.initial_eval,
        "final_eval": training.final_eval,
        "probe_timesteps": ecfg.probe_timesteps,
        "threshold": ecfg.threshold,
    }));
    p.put(out, "mask", "masks/target.png", &encode_mask_png(&result.mask)?)?;
    p.put(
        out,
        "match_trace",
        "traces/match.json",
        &pretty(&json!({ "loss": training.trace, "confidence": result.confidence })),
    )?;
    Ok(p)
}

fn run_discover(cfg: &RunConfig, out: &OutputDir) -> Result<Produced, CliError> {
    let base = configured_backend(cfg)?;
    let images = cfg
        .path_list("input.images")
        .iter()
        .map(load_rgb)
        .collect::<Result<Vec<_>, _>>()?;
    let class = object_class(cfg, None);
    let rcfg = region_config(cfg, "discover")?;
    let ecfg = extraction_config(cfg)?;
    let training = learn_common_concept_token(&base, &images, &class, &rcfg)?;
    let mut confidences = Vec::new();
    let mut p = Produced::new(serde_json::Value::Null);
    for (i, image) in images.iter().enumerate() {
        let result = extract_source_mask(&training.backend, &training.region, image.view(), &ecfg)?;
        confidences.push(result.confidence);
        p.put(out, &format!("mask_{i}"), &format!("masks/source_{i}.png"), &encode_mask_png(&result.mask)?)?;
    }
    p.summary = json!({
        "confidence": confidences,
        "initial_eval": training.initial_eval,
        "final_eval": training.final_eval,
        "probe_timesteps": ecfg.probe_timesteps,
    });
    p.put(
        out,
        "discover_trace",
        "traces/discover.json",
        &pretty(&json!({ "loss": training.trace, "confidence": confidences })),
    )?;
    Ok(p)
}
