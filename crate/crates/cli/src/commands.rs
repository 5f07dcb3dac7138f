//! Subcommand implementations. Each returns the text to print on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tse_core::checkpoint::{load_checkpoint, Checkpoint};
use tse_core::data::{condition, load_manifest, prepare, DataSource, Mode, Sampling};
use tse_core::eval::{evaluate, extract_waves, render_table, EvalReport};
use tse_core::frontend::{export_features, import_features, FeatureStack, Frontend, FrontendConfig};
use tse_core::model::{model_grad_check, ModelConfig, SizePreset, GRAD_CHECK_STEPS};
use tse_core::signal::{read_wav, write_wav, Waveform};
use tse_core::synth::synthesize_corpus;
use tse_core::tokenizer::{
    detokenize, encode_tokens, fit_codebook, load_codebook, save_codebook, save_tokens, tokenize, Codebook,
};
use tse_core::trainer::{RunLog, Stop, Trainer};

use crate::config::{ConfigSource, PipelineConfig};

/// Sidecar written next to every artifact as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub kind: String,
    pub config_hash: String,
    pub frontend: FrontendConfig,
    pub codebook_hash: Option<String>,
    pub inputs: Vec<String>,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_sidecar(artifact: &Path, p: &Provenance) -> Result<()> {
    let path = sidecar_path(artifact);
    let json = serde_json::to_string_pretty(p)? + "\n";
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
}

fn read_sidecar(artifact: &Path) -> Result<Option<Provenance>> {
    let path = sidecar_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Loads a codebook and checks it against the frontend, including the
/// frontend recorded in its sidecar when one exists.
fn load_matching_codebook(path: &Path, fe: &FrontendConfig) -> Result<Codebook> {
    let cb = load_codebook(path).with_context(|| format!("loading codebook {}", path.display()))?;
    if cb.layers() != fe.layer_count || cb.dim != fe.feat_dim {
        bail!(
            "codebook {} has {} layers of dimension {}, frontend produces {} of dimension {}",
            path.display(),
            cb.layers(),
            cb.dim,
            fe.layer_count,
            fe.feat_dim
        );
    }
    if let Some(side) = read_sidecar(path)? {
        if side.frontend != *fe {
            bail!("codebook {} was trained on a different frontend config", path.display());
        }
    }
    Ok(cb)
}

/// Features of a WAV file, or the contents of a FEAT1 file.
fn features_of(path: &Path, fe: &Frontend) -> Result<FeatureStack> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let fs = if is_wav {
        fe.extract(&read_wav(path)?)?
    } else {
        import_features(path)?
    };
    let c = fe.config();
    if fs.layers != c.layer_count || fs.dim != c.feat_dim {
        bail!(
            "{}: {} layers of dimension {}, expected {} of dimension {}",
            path.display(),
            fs.layers,
            fs.dim,
            c.layer_count,
            c.feat_dim
        );
    }
    Ok(fs)
}

/// Paths listed in a manifest: the last tab-separated field of each line,
/// relative to the manifest's directory.
fn manifest_paths(manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l.rsplit('\t').next().unwrap_or(l).trim()))
        .collect();
    if paths.is_empty() {
        bail!("{}: no files listed", manifest.display());
    }
    Ok(paths)
}

pub struct SynthArgs {
    /// Trailing utterances of each speaker held out of `train.tsv`.
    pub heldout_utterances: usize,
    pub heldout_mixtures: usize,
}

/// Writes the synthetic corpus as WAVs plus `train.tsv` (speaker, path of
/// every training utterance) and `heldout.tsv` (fixed mixtures of held-out
/// utterances only).
pub fn synth(cfg: &PipelineConfig, out: &Path, args: &SynthArgs) -> Result<String> {
    let s = &cfg.synth;
    let h = args.heldout_utterances;
    if h < 2 || h >= s.utterances {
        bail!("heldout utterances must be at least 2 and fewer than the {} per speaker", s.utterances);
    }
    if s.speakers < 2 {
        bail!("need at least two speakers to build mixtures");
    }
    let corpus = synthesize_corpus(s)?;
    create_dir(out)?;
    let rel = |spk: usize, idx: usize| format!("spk{spk:03}/utt{idx:03}.wav");
    let mut train = String::new();
    for u in &corpus.utterances {
        let r = rel(u.speaker, u.index);
        create_dir(&out.join(format!("spk{:03}", u.speaker)))?;
        write_wav(out.join(&r), &u.wave)?;
        if u.index < s.utterances - h {
            writeln!(train, "spk{:03}\t{r}", u.speaker)?;
        }
    }
    let first = s.utterances - h;
    let mut heldout = String::from("# target\tinterference\treference\tsnr_db\tseed\n");
    for i in 0..args.heldout_mixtures {
        let spk = i % s.speakers;
        let round = i / s.speakers;
        let other = (spk + 1 + round % (s.speakers - 1)) % s.speakers;
        let target = first + round % h;
        let reference = first + (round + 1) % h;
        let interference = first + i % h;
        let snr = cfg.train.snr_min + (cfg.train.snr_max - cfg.train.snr_min) * ((i % 6) as f64 / 5.0);
        writeln!(
            heldout,
            "{}\t{}\t{}\t{snr}\t{}",
            rel(spk, target),
            rel(other, interference),
            rel(spk, reference),
            cfg.synth.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
        )?;
    }
    std::fs::write(out.join("train.tsv"), train)?;
    std::fs::write(out.join("heldout.tsv"), heldout)?;
    Ok(format!(
        "wrote {} utterances of {} speakers to {}\n",
        corpus.utterances.len(),
        s.speakers,
        out.display()
    ))
}

pub fn train_kmeans(cfg: &PipelineConfig, manifest: &Path, out: &Path) -> Result<String> {
    let fe = Frontend::new(cfg.frontend.clone())?;
    let paths = manifest_paths(manifest)?;
    let stacks = paths.iter().map(|p| features_of(p, &fe)).collect::<Result<Vec<_>>>()?;
    let cb = fit_codebook(&stacks, &cfg.kmeans)?;
    create_dir(out)?;
    let path = out.join("codebook.kmc");
    save_codebook(&path, &cb)?;
    write_sidecar(
        &path,
        &Provenance {
            kind: "codebook".into(),
            config_hash: cfg.hash(),
            frontend: cfg.frontend.clone(),
            codebook_hash: Some(cb.hash()),
            inputs: vec![display(manifest)],
        },
    )?;
    let mut s = format!(
        "codebook: {} layers, K = {}, E = {}, {} frames from {} files\n",
        cb.layers(),
        cb.k,
        cb.dim,
        cb.meta.frames,
        stacks.len()
    );
    for (l, (inertia, iters)) in cb.meta.inertia.iter().zip(&cb.meta.iterations).enumerate() {
        writeln!(s, "layer {l}: inertia {inertia:.6} after {iters} iterations")?;
    }
    writeln!(s, "wrote {}", path.display())?;
    Ok(s)
}

pub fn tokenize_cmd(cfg: &PipelineConfig, codebook: &Path, input: &Path, reference: Option<&Path>, out: &Path) -> Result<String> {
    let fe = Frontend::new(cfg.frontend.clone())?;
    let cb = load_matching_codebook(codebook, &cfg.frontend)?;
    let grid = match reference {
        None => tokenize(&features_of(input, &fe)?, &cb)?,
        Some(r) => {
            let (mixture, reference) = (read_wav(input)?, read_wav(r)?);
            let c = condition(&mixture, mixture.len(), &reference, reference.len(), Mode::Standard, &fe, &cb)?;
            c.mix_tokens.expect("standard mode yields tokens")
        }
    };
    save_tokens(out, &grid)?;
    let mut inputs = vec![display(input)];
    inputs.extend(reference.map(display));
    write_sidecar(
        out,
        &Provenance {
            kind: "tokens".into(),
            config_hash: cfg.hash(),
            frontend: cfg.frontend.clone(),
            codebook_hash: Some(cb.hash()),
            inputs,
        },
    )?;
    Ok(format!("{} layers x {} frames -> {}\n", grid.layers, grid.frames, out.display()))
}

pub struct TrainArgs<'a> {
    pub manifest: &'a Path,
    pub codebook: &'a Path,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
}

/// Samples used for accuracy probes: the first few entries of a fixed list.
fn probe_samples(data: &DataSource, mode: Mode, fe: &Frontend, cb: &Codebook) -> Result<Vec<tse_core::data::Prepared>> {
    let Sampling::Fixed(specs) = &data.sampling else {
        return Ok(Vec::new());
    };
    specs
        .iter()
        .take(8)
        .map(|s| Ok(prepare(&data.synthesize(s)?, mode, fe, cb)?))
        .collect()
}

/// Trains from scratch, or continues a checkpoint. On resume the
/// checkpoint's configs are authoritative; only `train.steps` may change.
pub fn train(src: &ConfigSource, args: &TrainArgs) -> Result<String> {
    let data = load_manifest(args.manifest)?;
    let (ckpt, cfg) = match args.resume {
        Some(path) => {
            if let Some(key) = src.touches_other_than(&["train.steps"]) {
                bail!("on resume the config comes from the checkpoint; {key} cannot be changed (only train.steps)");
            }
            let mut ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let mut cfg = PipelineConfig {
                frontend: ckpt.header.frontend.clone(),
                model: ckpt.header.model.clone(),
                train: ckpt.header.train.clone(),
                ..PipelineConfig::default()
            };
            if !src.assignments.is_empty() {
                let steps = src.resolve()?.train.steps;
                cfg.train.steps = steps;
                ckpt.header.train.steps = steps;
            }
            (Some(ckpt), cfg)
        }
        None => {
            let cfg = src.resolve()?;
            cfg.check_pipeline()?;
            (None, cfg)
        }
    };
    let fe = Frontend::new(cfg.frontend.clone())?;
    let cb = load_matching_codebook(args.codebook, &cfg.frontend)?;
    let mut trainer = match ckpt {
        Some(c) => Trainer::resume(c, &fe, &cb, &data)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &fe, &cb, &data)?,
    };
    let probe = probe_samples(&data, cfg.train.mode, &fe, &cb)?;
    let start = trainer.step();
    let mut log = RunLog::default();
    let stop = trainer.run(Some(args.out), &probe, &mut log)?;
    let mut s = format!("mode {}  steps {start} -> {}\n", cfg.train.mode, trainer.step());
    let losses = log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        writeln!(s, "loss {first:.4} -> {last:.4}")?;
    }
    if let Some(acc) = log.records.iter().rev().find_map(|r| r.probe_accuracy.as_ref()) {
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        writeln!(s, "probe accuracy {mean:.4}")?;
    }
    if stop == Stop::TargetAccuracy {
        writeln!(s, "stopped early: probe accuracy reached the target")?;
    }
    writeln!(s, "wrote {}", args.out.join("final.tslm").display())?;
    Ok(s)
}

fn load_pair(checkpoint: &Path, codebook: &Path) -> Result<(Checkpoint, Frontend, Codebook)> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let fe = Frontend::new(ckpt.header.frontend.clone())?;
    let cb = load_matching_codebook(codebook, fe.config())?;
    tse_core::eval::check_compatible(&ckpt, &fe, &cb)
        .with_context(|| format!("{} does not match checkpoint {}", codebook.display(), checkpoint.display()))?;
    Ok((ckpt, fe, cb))
}

pub struct ExtractArgs<'a> {
    pub checkpoint: &'a Path,
    pub codebook: &'a Path,
    pub mixture: &'a Path,
    pub reference: &'a Path,
    pub out: &'a Path,
    /// Also write the centroid features of the extracted tokens.
    pub features: Option<&'a Path>,
}

pub fn extract(args: &ExtractArgs) -> Result<String> {
    let (ckpt, fe, cb) = load_pair(args.checkpoint, args.codebook)?;
    let grid = extract_waves(&ckpt, &read_wav(args.mixture)?, &read_wav(args.reference)?, &fe, &cb)?;
    let side = Provenance {
        kind: "tokens".into(),
        config_hash: ckpt.header.config_hash.clone(),
        frontend: ckpt.header.frontend.clone(),
        codebook_hash: Some(cb.hash()),
        inputs: vec![display(args.checkpoint), display(args.mixture), display(args.reference)],
    };
    save_tokens(args.out, &grid)?;
    write_sidecar(args.out, &side)?;
    let mut s = format!("{} layers x {} frames -> {}\n", grid.layers, grid.frames, args.out.display());
    if let Some(path) = args.features {
        export_features(path, &detokenize(&grid, &cb)?, 4)?;
        write_sidecar(
            path,
            &Provenance {
                kind: "features".into(),
                ..side
            },
        )?;
        writeln!(s, "features -> {}", path.display())?;
    }
    Ok(s)
}

/// Evaluates on a fixed mixture manifest; writes `report.json` and
/// `report.txt`. The flag is false when the oracle rows are not exact.
pub fn eval(checkpoint: &Path, codebook: &Path, manifest: &Path, out: &Path) -> Result<(String, bool)> {
    let (ckpt, fe, cb) = load_pair(checkpoint, codebook)?;
    let data = load_manifest(manifest)?;
    let Sampling::Fixed(specs) = &data.sampling else {
        bail!("{}: evaluation needs a fixed mixture manifest (3 to 5 columns)", manifest.display());
    };
    let samples = specs.iter().map(|s| data.synthesize(s)).collect::<tse_core::Result<Vec<_>>>()?;
    let report: EvalReport = evaluate(&ckpt, &samples, &fe, &cb)?;
    create_dir(out)?;
    let table = render_table(&report);
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(out.join("report.txt"), &table)?;
    Ok((table, report.oracle_ok))
}

/// Finite-difference check of the tiny model in both input modes.
pub fn grad_check(seed: u64) -> Result<(String, bool)> {
    let mut s = String::new();
    let mut ok = true;
    for hybrid in [false, true] {
        let cfg = ModelConfig {
            hybrid,
            seed,
            ..ModelConfig::preset(SizePreset::Tiny)
        };
        let r = model_grad_check(&cfg, 4, 3, seed, GRAD_CHECK_STEPS)?;
        writeln!(s, "{} inputs:", if hybrid { "feature" } else { "token" })?;
        for p in &r.params {
            writeln!(s, "  {:<28} max rel err {:.3e}  max |grad| {:.3e}", p.name, p.max_rel_err, p.max_abs_grad)?;
        }
        let worst = r.max_rel_err();
        ok &= worst <= 1e-4;
        writeln!(s, "  worst {worst:.3e} ({})", if worst <= 1e-4 { "ok" } else { "FAILED" })?;
    }
    Ok((s, ok))
}

/// Quick consistency checks that need no data.
pub fn selftest() -> Result<(String, bool)> {
    use tse_tensor::{Graph, Tensor};
    let mut s = String::new();
    let mut ok = true;
    let mut record = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        let _ = writeln!(s, "{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
    };

    let k = 7;
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[3, k]));
    let ce = g.cross_entropy(logits, &[0, 3, 6], &[true; 3])?;
    let v = g.value(ce).item();
    record("uniform cross-entropy", (v - (k as f64).ln()).abs() <= 1e-12, format!("{v:.12} vs ln {k}"));

    let (report, _) = grad_check(0)?;
    let worst = report
        .lines()
        .filter_map(|l| l.trim().strip_prefix("worst "))
        .filter_map(|l| l.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    record("tiny gradient check", worst <= 1e-4, format!("worst relative error {worst:.3e}"));

    let fe = Frontend::new(FrontendConfig {
        layer_count: 2,
        ..FrontendConfig::default()
    })?;
    let wave = Waveform::new((0..8000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect());
    let fs = fe.extract(&wave)?;
    let back = tse_core::frontend::decode_features(&tse_core::frontend::encode_features(&fs, 8)?)?;
    record("FEAT1 round trip", back == fs, format!("{} frames", fs.frames));

    let cb = fit_codebook(std::slice::from_ref(&fs), &tse_core::kmeans::KMeansParams { k: 4, ..Default::default() })?;
    let cb2 = tse_core::tokenizer::decode_codebook(&tse_core::tokenizer::encode_codebook(&cb))?;
    record("KMC1 round trip", cb2 == cb, format!("hash {}", &cb.hash()[..12]));
    let grid = tokenize(&fs, &cb)?;
    let grid2 = tse_core::tokenizer::decode_tokens(&encode_tokens(&grid))?;
    record("TOK1 round trip", grid2 == grid, format!("{} tokens", grid.tokens.len()));
    Ok((s, ok))
}
