//! Command implementations behind the `vittt` binary: property suites, toy
//! training, inference, interpretability exports, and complexity benchmarks.
//!
//! Every run resolves a flat `key = value` configuration (file values
//! overridden by CLI flags), validates it fully before touching the output
//! directory, and echoes the resolved configuration into
//! `<out>/manifest.cfg`. Outputs are byte-deterministic given the seed;
//! wall-clock columns are the only exception.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use vittt_core::backbone::{model_logits, ModelConfig, ModelParams, PoolStrategy};
use vittt_core::block::{GateKind, W0Mode};
use vittt_core::complexity::{
    analytic_report, measure_quadratic_attention, measure_vittt_block, report_csv_row, Arch,
    ComplexityReport, REPORT_CSV_HEADER,
};
use vittt_core::error::{Error, Result};
use vittt_core::interpret::{
    erf_compute, gmm_extract, recon_trace, Direction, ErfProbe,
};
use vittt_core::io::{
    load_checkpoint, load_dataset_dir, read_container, save_checkpoint, save_dataset_dir,
    write_csv_grid, write_pgm,
};
use vittt_core::tensor::Tensor;
use vittt_core::train::{synthetic_blobs, train_toy, OptimizerKind, ToyDataset, TrainConfig};
use vittt_core::ttt::{Form, InnerModel};
use vittt_core::verify::suite_by_name;

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// Flat resolved configuration: sorted `key = value` pairs.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig::default()
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_default(&mut self, key: &str, value: impl ToString) {
        self.values
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value for {key}: `{raw}`"))),
        }
    }

    pub fn parse_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(other) => Err(Error::Config(format!("bad bool for {key}: `{other}`"))),
        }
    }

    /// Sorted manifest body, loadable as a config file.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = PathBuf::from(cfg.get_or("out", "vittt-out"));
    fs::create_dir_all(&out)?;
    fs::write(out.join("manifest.cfg"), cfg.manifest())?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// model / image resolution
// ---------------------------------------------------------------------------

/// Builds the model configuration from `model.*` keys.
pub fn model_config_from(cfg: &RunConfig) -> Result<ModelConfig> {
    let mut mc = ModelConfig::by_name(cfg.get_or("model.preset", "micro"))?;
    if let Some(pool) = cfg.get("model.pool") {
        mc.pool = match pool {
            "mean_pool" => PoolStrategy::MeanPool,
            "max_pool" => PoolStrategy::MaxPool,
            "head_class_tok" => PoolStrategy::HeadClassTok,
            "mid_class_tok" => PoolStrategy::MidClassTok,
            "double_class_tok" => PoolStrategy::DoubleClassTok,
            other => return Err(Error::Config(format!("unknown pool `{other}`"))),
        };
    }
    if let Some(inner) = cfg.get("model.inner_model") {
        mc.ttt.inner_model = match inner {
            "plain_linear" => InnerModel::PlainLinear,
            "ln_residual" => InnerModel::LnResidual,
            other => return Err(Error::Config(format!("unknown inner model `{other}`"))),
        };
    }
    if let Some(form) = cfg.get("model.form") {
        mc.ttt.form = match form {
            "primal" => Form::Primal,
            "dual" => Form::Dual,
            other => return Err(Error::Config(format!("unknown form `{other}`"))),
        };
    }
    if let Some(gate) = cfg.get("model.gate") {
        mc.gate = match gate {
            "gelu" => GateKind::Gelu,
            "sigmoid" => GateKind::Sigmoid,
            other => return Err(Error::Config(format!("unknown gate `{other}`"))),
        };
    }
    if let Some(mode) = cfg.get("model.w0_mode") {
        mc.w0_mode = match mode {
            "fixed" => W0Mode::Fixed,
            "shared" => W0Mode::SharedLearnable,
            "dual" => W0Mode::DualLearnable,
            other => return Err(Error::Config(format!("unknown w0 mode `{other}`"))),
        };
    }
    mc.ttt.minibatch_size = cfg.parse("model.minibatch", mc.ttt.minibatch_size)?;
    mc.ttt.eta_base = cfg.parse("model.eta_base", mc.ttt.eta_base)?;
    mc.dual_direction = cfg.parse_bool("model.dual_direction", mc.dual_direction)?;
    mc.num_classes = cfg.parse("model.classes", mc.num_classes)?;
    mc.validate()?;
    Ok(mc)
}

/// Model parameters: `fresh` (seeded init) or a checkpoint path.
pub fn load_params(spec: &str, mc: &ModelConfig, seed: u64) -> Result<ModelParams> {
    if spec == "fresh" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(mc, &mut rng)
    } else {
        load_checkpoint(Path::new(spec), mc)
    }
}

/// Image sources: `zeros`, `noise[:seed]`, `blob:<class>[:seed]`, or a
/// single-tensor container path.
pub fn load_image(spec: &str, mc: &ModelConfig) -> Result<Tensor> {
    let shape = [mc.image_h, mc.image_w, mc.channels];
    if spec == "zeros" {
        return Ok(Tensor::zeros(&shape));
    }
    if let Some(rest) = spec.strip_prefix("noise") {
        let seed: u64 = rest
            .strip_prefix(':')
            .map(|s| s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`"))))
            .transpose()?
            .unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(Tensor::randn(&shape, 0.5, &mut rng));
    }
    if let Some(rest) = spec.strip_prefix("blob:") {
        let mut parts = rest.split(':');
        let class: usize = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Config(format!("bad blob class in `{spec}`")))?;
        let seed: u64 = match parts.next() {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("bad seed `{s}`")))?,
            None => 0,
        };
        if class >= 4 {
            return Err(Error::Config("blob class must be 0..=3".into()));
        }
        let data = synthetic_blobs(mc.image_h, mc.image_w, mc.channels, class + 1, seed);
        return Ok(data.images[class].clone());
    }
    let tensors = read_container(Path::new(spec))?;
    match tensors.into_iter().next() {
        Some((_, t)) if t.shape() == shape => Ok(t),
        Some((_, t)) => Err(Error::Config(format!(
            "image {} has shape {:?}, model wants {shape:?}",
            spec,
            t.shape()
        ))),
        None => Err(Error::Config(format!("{spec}: empty container"))),
    }
}

fn image_stem(spec: &str) -> String {
    let base = Path::new(spec)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(spec);
    base.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

/// Exit status carried back to `main`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    PropertyViolation,
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let suite = cfg
        .get("verify.suite")
        .ok_or_else(|| Error::Config("verify: missing suite name".into()))?
        .to_string();
    let default_seeds = match suite.as_str() {
        "dual_form" => 200,
        "theorem1" | "theorem2" | "oracle" => 100,
        _ => 1,
    };
    let seeds: usize = cfg.parse("verify.seeds", default_seeds)?;
    let base_seed: u64 = cfg.parse("seed", 0u64)?;
    let max_t: usize = cfg.parse("verify.max_t", 64usize)?;
    if max_t == 0 {
        return Err(Error::Config("verify: --T must be >= 1".into()));
    }
    let scale = cfg.get_or("verify.scale", "micro");
    if scale != "micro" {
        return Err(Error::Config(format!(
            "verify: only the micro scale is defined, got `{scale}`"
        )));
    }
    // validate the suite name before writing anything
    if !["dual_form", "theorem1", "theorem2", "oracle", "gradcheck"].contains(&suite.as_str()) {
        return Err(Error::Config(format!("unknown suite `{suite}`")));
    }
    let out = prepare_out_dir(cfg)?;
    let report = match suite.as_str() {
        "theorem1" => vittt_core::verify::theorem1_suite(seeds, max_t, base_seed),
        "theorem2" => vittt_core::verify::theorem2_suite(seeds, max_t, base_seed),
        _ => suite_by_name(&suite, seeds, base_seed)?,
    };
    fs::write(out.join(format!("verify_{suite}.txt")), report.render())?;
    println!(
        "suite {suite}: {} ({} cases, worst rel {:.3e}, {:.2}s)",
        if report.pass { "PASS" } else { "FAIL" },
        report.cases.len(),
        report.worst_rel(),
        report.elapsed_s
    );
    for case in report.cases.iter().filter(|c| !c.pass) {
        println!("  FAIL {}: max_abs {:.3e} max_rel {:.3e}", case.label, case.max_abs, case.max_rel);
    }
    Ok(if report.pass {
        Outcome::Ok
    } else {
        Outcome::PropertyViolation
    })
}

pub fn cmd_train_toy(cfg: &RunConfig) -> Result<Outcome> {
    let mc = model_config_from(cfg)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let tc = TrainConfig {
        steps: cfg.parse("train.steps", 300usize)?,
        batch_size: cfg.parse("train.batch_size", 16usize)?,
        optimizer: match cfg.get_or("train.optimizer", "adamw") {
            "sgd" => OptimizerKind::Sgd,
            "adamw" => OptimizerKind::AdamW,
            other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
        },
        lr: cfg.parse("train.lr", 3e-3)?,
        momentum: cfg.parse("train.momentum", 0.9)?,
        weight_decay: cfg.parse("train.weight_decay", 0.01)?,
        seed,
        eval_every: cfg.parse("train.eval_every", 25usize)?,
        stop_at_accuracy: cfg.parse("train.stop_at_accuracy", 1.1)?,
    };
    let samples: usize = cfg.parse("train.samples", 200usize)?;
    let shuffle: bool = cfg.parse_bool("train.shuffle_labels", false)?;
    let save_dataset: bool = cfg.parse_bool("train.save_dataset", false)?;

    let mut data: ToyDataset = match cfg.get("train.dataset") {
        Some(dir) => load_dataset_dir(Path::new(dir))?,
        None => synthetic_blobs(mc.image_h, mc.image_w, mc.channels, samples, seed),
    };
    if shuffle {
        data = data.shuffled_labels(seed ^ 0x5A5A);
    }

    let out = prepare_out_dir(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&mc, &mut rng)?;
    let log = train_toy(&mut params, &mc, &data, &tc)?;

    save_checkpoint(&out.join("model.vttt"), &params)?;
    if save_dataset {
        save_dataset_dir(&out.join("dataset"), &data)?;
    }
    let mut csv = String::from("step,loss,train_accuracy");
    for l in 0..mc.depth {
        let _ = write!(csv, ",recon_l{l}");
    }
    csv.push('\n');
    for e in &log.entries {
        let acc = e
            .train_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        let _ = write!(csv, "{},{:.17e},{}", e.step, e.loss, acc);
        for l in 0..mc.depth {
            match &e.recon_per_layer {
                Some(v) => {
                    let _ = write!(csv, ",{:.17e}", v[l]);
                }
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), csv)?;
    println!(
        "train-toy: {} steps, final train accuracy {:.3}",
        log.steps_run, log.final_accuracy
    );
    Ok(Outcome::Ok)
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<Outcome> {
    let mc = model_config_from(cfg)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let ckpt = cfg.get_or("infer.checkpoint", "fresh").to_string();
    let params = load_params(&ckpt, &mc, seed)?;

    let mut rows: Vec<(String, Tensor)> = Vec::new();
    if let Some(dir) = cfg.get("infer.dataset") {
        let data = load_dataset_dir(Path::new(dir))?;
        for (i, img) in data.images.iter().enumerate() {
            rows.push((format!("{i}"), model_logits(&params, &mc, img)?));
        }
    } else {
        let spec = cfg.get_or("infer.image", "zeros").to_string();
        let img = load_image(&spec, &mc)?;
        rows.push((image_stem(&spec), model_logits(&params, &mc, &img)?));
    }

    let out = prepare_out_dir(cfg)?;
    let mut csv = String::from("sample");
    for k in 0..mc.num_classes {
        let _ = write!(csv, ",logit_{k}");
    }
    csv.push('\n');
    for (tag, logits) in &rows {
        let _ = write!(csv, "{tag}");
        for v in logits.data() {
            let _ = write!(csv, ",{v:.17e}");
        }
        csv.push('\n');
    }
    fs::write(out.join("logits.csv"), csv)?;
    println!("infer: {} sample(s) written to logits.csv", rows.len());
    Ok(Outcome::Ok)
}

pub fn cmd_gmm(cfg: &RunConfig) -> Result<Outcome> {
    let mc = model_config_from(cfg)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let params = load_params(cfg.get_or("gmm.checkpoint", "fresh"), &mc, seed)?;
    let image_spec = cfg.get_or("gmm.image", "noise").to_string();
    let image = load_image(&image_spec, &mc)?;
    let layer: usize = cfg.parse("gmm.layer", mc.depth - 1)?;
    let direction = Direction::parse(cfg.get_or("gmm.direction", "forth"))?;
    let top: f64 = cfg.parse("gmm.top_percent", 30.0)?;

    let map = gmm_extract(&params, &mc, &image, layer, direction, top)?;
    let out = prepare_out_dir(cfg)?;
    let stem = image_stem(&image_spec);
    let base = format!("{stem}_gmm_L{layer}_{}", direction.name());
    write_csv_grid(
        &out.join(format!("{base}.csv")),
        map.grid_h,
        map.grid_w,
        &map.values,
    )?;
    write_pgm(
        &out.join(format!("{base}.pgm")),
        map.grid_h,
        map.grid_w,
        &map.values,
    )?;
    let mask: Vec<f64> = map.top_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_csv_grid(
        &out.join(format!("{base}.top.csv")),
        map.grid_h,
        map.grid_w,
        &mask,
    )?;
    println!(
        "gmm: layer {layer} {} coefficient_of_variation = {:.6}",
        direction.name(),
        map.coefficient_of_variation()
    );
    Ok(Outcome::Ok)
}

pub fn cmd_erf(cfg: &RunConfig) -> Result<Outcome> {
    let mc = model_config_from(cfg)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let params = load_params(cfg.get_or("erf.checkpoint", "fresh"), &mc, seed)?;
    let image = load_image(cfg.get_or("erf.image", "noise"), &mc)?;
    let probe = match cfg.get_or("erf.probe", "autodiff") {
        "autodiff" => ErfProbe::Autodiff,
        "finite-diff" | "finite_diff" => ErfProbe::FiniteDiff,
        other => return Err(Error::Config(format!("unknown probe `{other}`"))),
    };
    let map = erf_compute(&params, &mc, &image, probe)?;
    let out = prepare_out_dir(cfg)?;
    write_csv_grid(&out.join("erf.csv"), map.h, map.w, &map.values)?;
    write_pgm(&out.join("erf.pgm"), map.h, map.w, &map.values)?;
    let coverage = map.values.iter().filter(|&&v| v > 0.0).count();
    println!(
        "erf: {}x{} map, {} of {} pixels with positive response",
        map.h,
        map.w,
        coverage,
        map.values.len()
    );
    Ok(Outcome::Ok)
}

pub fn cmd_recon_trace(cfg: &RunConfig) -> Result<Outcome> {
    let mc = model_config_from(cfg)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let params = load_params(cfg.get_or("trace.checkpoint", "fresh"), &mc, seed)?;
    let image = load_image(cfg.get_or("trace.image", "noise"), &mc)?;
    let traces = recon_trace(&params, &mc, &image)?;
    let out = prepare_out_dir(cfg)?;
    let mut csv = String::from("layer,direction,head,minibatch,loss\n");
    for t in &traces {
        for (h, curve) in t.per_head.iter().enumerate() {
            for (i, loss) in curve.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{h},{i},{:.17e}", t.layer, t.direction.name(), loss);
            }
        }
    }
    fs::write(out.join("recon_trace.csv"), csv)?;
    println!("recon-trace: {} layer-direction curves", traces.len());
    Ok(Outcome::Ok)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let arch = Arch::parse(cfg.get_or("bench.arch", "vittt"))?;
    let ts: Vec<usize> = cfg
        .get_or("bench.t", "64,256,1024")
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad sequence length `{s}`")))
        })
        .collect::<Result<_>>()?;
    let d: usize = cfg.parse("bench.d", 192usize)?;
    let head_dim: usize = cfg.parse("bench.head_dim", 64usize)?;
    if arch == Arch::Vittt && d % head_dim != 0 {
        return Err(Error::Config(format!("D {d} not divisible by head dim {head_dim}")));
    }
    let minibatch: usize = cfg.parse("bench.b", 16usize)?;
    let state_n: usize = cfg.parse("bench.n", 16usize)?;
    let warmups: usize = cfg.parse("bench.warmups", 2usize)?;
    let reps: usize = cfg.parse("bench.reps", 5usize)?;
    let seed: u64 = cfg.parse("seed", 0u64)?;
    let threads: usize = cfg.parse("threads", 1usize)?;
    let precision = cfg.get_or("precision", "f64").to_string();
    if precision != "f64" && precision != "f32" {
        return Err(Error::Config(format!("unknown precision `{precision}`")));
    }
    // cost guard: refuse sweeps whose analytic work explodes the desk budget
    let budget: u64 = cfg.parse("bench.budget", 20_000_000_000u64)?;
    for &t in &ts {
        let analytic = vittt_core::complexity::flops_formula(
            arch,
            t as u64,
            d as u64,
            head_dim as u64,
            minibatch as u64,
            state_n as u64,
        );
        if analytic > budget {
            return Err(Error::Config(format!(
                "bench: T = {t} needs {analytic} MACs, over the {budget} budget"
            )));
        }
    }

    let reports: Vec<ComplexityReport> = match arch {
        Arch::Vittt => {
            let nh = d / head_dim;
            if precision == "f32" {
                measure_vittt_block::<f32>(&ts, d, nh, head_dim, minibatch, seed, warmups, reps)?
            } else {
                measure_vittt_block::<f64>(&ts, d, nh, head_dim, minibatch, seed, warmups, reps)?
            }
        }
        Arch::Vit => {
            if precision == "f32" {
                measure_quadratic_attention::<f32>(&ts, d, seed, warmups, reps)?
            } else {
                measure_quadratic_attention::<f64>(&ts, d, seed, warmups, reps)?
            }
        }
        // vim is never executed: analytic columns only
        Arch::Vim => ts
            .iter()
            .map(|&t| analytic_report(Arch::Vim, t, d, head_dim, minibatch, state_n))
            .collect(),
    };

    let mut reports = reports;
    for r in &mut reports {
        r.threads = threads;
    }
    let out = prepare_out_dir(cfg)?;
    let mut csv = String::from(REPORT_CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&report_csv_row(r));
        csv.push('\n');
    }
    fs::write(out.join("bench.csv"), csv)?;
    for r in &reports {
        println!("{}", report_csv_row(r));
    }
    Ok(Outcome::Ok)
}

/// Routes an error to its process exit code: 2 for usage/config problems,
/// 3 for numeric aborts.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_roundtrip_and_overrides() {
        let dir = std::env::temp_dir().join(format!("vittt-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        fs::write(&path, "# comment\ntrain.steps = 42\nmodel.preset = micro\n").unwrap();
        let mut cfg = RunConfig::new();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.parse::<usize>("train.steps", 0).unwrap(), 42);
        cfg.set("train.steps", 7); // CLI flag wins
        assert_eq!(cfg.parse::<usize>("train.steps", 0).unwrap(), 7);
        let manifest = cfg.manifest();
        assert!(manifest.contains("train.steps = 7"));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_config_is_rejected_before_any_output() {
        let dir = std::env::temp_dir().join(format!("vittt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        fs::write(&path, "no equals sign here\n").unwrap();
        let mut cfg = RunConfig::new();
        assert!(cfg.load_file(&path).is_err());

        // unknown suite: no out dir must appear
        let mut cfg = RunConfig::new();
        let out = dir.join("should-not-exist");
        cfg.set("verify.suite", "bogus");
        cfg.set("out", out.display().to_string());
        assert!(cmd_verify(&cfg).is_err());
        assert!(!out.exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn image_specs_resolve() {
        let mc = ModelConfig::micro();
        assert_eq!(load_image("zeros", &mc).unwrap(), Tensor::zeros(&[16, 16, 3]));
        let a = load_image("noise:5", &mc).unwrap();
        let b = load_image("noise:5", &mc).unwrap();
        assert_eq!(a, b);
        let blob = load_image("blob:2:1", &mc).unwrap();
        assert_eq!(blob.shape(), &[16, 16, 3]);
        assert!(load_image("blob:9", &mc).is_err());
    }
}
