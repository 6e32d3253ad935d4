use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use aat_core::bench::{gate_report, generate_bench, generate_datasets, load_model, save_model, BenchSpec, LoadedModel, PairDataset};
use aat_core::bp::{export_config, polarization_by_layer, train_gating, BpParams};
use aat_core::encoder::AblationConfig;
use aat_core::eval::{config_stats, evaluate, grid_search_single_head, naive_joint_ablation, GridSearchTable};
use aat_core::ga::{build_hard_negatives, evolve, GaParams};
use aat_core::sweep::{sweep_beta, sweep_dsize, MaskSource, SearchMethod, BETA_GRID, DSIZE_GRID};
use aat_core::AatError;

use crate::errors::Invariant;
use crate::manifest::{path_for, RunManifest};
use crate::params::{read_overrides, resolve, seed_in};
use crate::{Cli, Command, Method};

struct Ctx {
    seed: u64,
    /// Whether the seed came from `--seed` or the params file.
    seed_given: bool,
    threads: usize,
    overrides: Value,
    started: Instant,
}

impl Ctx {
    fn manifest(&self, name: &str, params: impl Serialize) -> Result<RunManifest> {
        Ok(RunManifest::new(name, serde_json::to_value(params)?, self.seed, self.threads))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let overrides = read_overrides(cli.params.as_deref())?;
    let given = cli.seed.or(seed_in(&overrides)?);
    let seed = given.unwrap_or(0);
    let threads = match cli.threads {
        Some(t) => t,
        None => overrides.get("threads").and_then(Value::as_u64).map_or(1, |t| t as usize),
    };
    if threads == 0 {
        return Err(Invariant("--threads must be at least 1".into()).into());
    }
    let ctx = Ctx {
        seed,
        seed_given: given.is_some(),
        threads,
        overrides,
        started: Instant::now(),
    };
    match &cli.command {
        Command::GenModel(a) => gen_model(&ctx, a),
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Grid(a) => grid(&ctx, a),
        Command::NaiveJoint(a) => naive_joint(&ctx, a),
        Command::Ga(a) => ga(&ctx, a),
        Command::Bp(a) => bp(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::SweepBeta(a) => sweep_beta_cmd(&ctx, a),
        Command::SweepDsize(a) => sweep_dsize_cmd(&ctx, a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .with_context(|| format!("writing {}", path.display()))
}

fn history_path(out: &Path, given: Option<&PathBuf>) -> PathBuf {
    given.cloned().unwrap_or_else(|| {
        let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}.history.jsonl"))
    })
}

fn model(path: &Path) -> Result<LoadedModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

/// Loads pairs and checks they fit the model.
fn data(path: &Path, m: &LoadedModel) -> Result<PairDataset> {
    let d = PairDataset::load(path).with_context(|| format!("loading data {}", path.display()))?;
    let meta = d.meta();
    let s = m.weights.spec;
    if d.is_empty() {
        return Err(Invariant(format!("{} holds no pairs", path.display())).into());
    }
    if (meta.n_tokens, meta.token_dim, meta.embed_dim) != (s.num_tokens, s.token_dim, s.embed_dim) {
        return Err(Invariant(format!(
            "{} has tokens {}x{} and embeddings of {}, model expects {}x{} and {}",
            path.display(),
            meta.n_tokens,
            meta.token_dim,
            meta.embed_dim,
            s.num_tokens,
            s.token_dim,
            s.embed_dim
        ))
        .into());
    }
    Ok(d)
}

fn config_for(path: Option<&Path>, m: &LoadedModel) -> Result<AblationConfig> {
    let cfg = match path {
        Some(p) => AblationConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => AblationConfig::identity_for(&m.weights.spec),
    };
    cfg.check_matches(&m.weights.spec)?;
    Ok(cfg)
}

fn gen_model(ctx: &Ctx, a: &crate::GenModelArgs) -> Result<()> {
    let mut spec: BenchSpec = resolve(&BenchSpec::with_seed(ctx.seed), &ctx.overrides)?;
    spec.seed = ctx.seed;
    if let Some(k) = a.kappa {
        spec.kappa = k;
    }
    if let Some(p) = &a.planted {
        spec.planted_heads = p.clone();
    }
    let bench = generate_bench(&spec)?;
    ensure_parent(&a.out)?;
    save_model(&a.out, &bench.weights, Some(&spec), Some(&bench.manifest))?;
    let gate_path = a.out.with_file_name(format!(
        "{}.gate.json",
        a.out.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy())
    ));
    write_json(&gate_path, &bench.gate)?;
    log::info!("benchmark gate: planted ablation gains {:.2} mean-R", bench.gate.gain);

    let mut man = ctx.manifest("gen-model", &spec)?;
    man.outputs = vec![a.out.clone(), a.out.with_extension("bin"), gate_path];
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn gen_data(ctx: &Ctx, a: &crate::GenDataArgs) -> Result<()> {
    let m = model(&a.model)?;
    let spec = m
        .bench
        .clone()
        .ok_or_else(|| Invariant(format!("{} carries no benchmark spec", a.model.display())))?;
    if ctx.seed_given && ctx.seed != spec.seed {
        return Err(Invariant(format!("seed {} differs from the model's seed {}", ctx.seed, spec.seed)).into());
    }
    let splits = generate_datasets(&spec, &m.weights)?;
    let gate = gate_report(&spec, &m.weights, &splits.test)?;
    if !gate.passed {
        return Err(AatError::BenchRejected {
            seed: spec.seed,
            gain: gate.gain,
            required: aat_core::bench::GATE_MIN_GAIN,
        }
        .into());
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut outputs = Vec::new();
    for d in [&splits.train, &splits.val, &splits.test] {
        let p = a.out_dir.join(format!("{}.json", d.split));
        d.save(&p)?;
        outputs.push(p.clone());
        outputs.push(p.with_extension("bin"));
    }
    let gate_path = a.out_dir.join("gate.json");
    write_json(&gate_path, &gate)?;
    outputs.push(gate_path);

    let mut man = RunManifest::new("gen-data", serde_json::to_value(&spec)?, spec.seed, ctx.threads);
    man.inputs = vec![a.model.clone()];
    man.outputs = outputs;
    man.write(&a.out_dir.join("gen-data.run.json"), ctx.started.elapsed())
}

fn grid(ctx: &Ctx, a: &crate::GridArgs) -> Result<()> {
    let m = model(&a.model)?;
    let d = data(&a.data, &m)?;
    let table = grid_search_single_head(&m.weights, &d, a.beta, ctx.threads)?;
    ensure_parent(&a.out)?;
    table.write_csv(&a.out)?;
    let mut man = ctx.manifest("grid", json!({ "beta": a.beta }))?;
    man.inputs = vec![a.model.clone(), a.data.clone()];
    man.outputs = vec![a.out.clone()];
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn naive_joint(ctx: &Ctx, a: &crate::NaiveJointArgs) -> Result<()> {
    let table = GridSearchTable::read_csv(&a.grid, a.beta).with_context(|| format!("reading grid {}", a.grid.display()))?;
    let cfg = naive_joint_ablation(&table, a.beta)?;
    ensure_parent(&a.out)?;
    cfg.save(&a.out)?;
    let mut man = ctx.manifest("naive-joint", json!({ "beta": a.beta, "ablated": cfg.ablated_heads() }))?;
    man.inputs = vec![a.grid.clone()];
    man.outputs = vec![a.out.clone()];
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn ga_params(ctx: &Ctx) -> Result<GaParams> {
    let mut p: GaParams = resolve(&GaParams::default(), &ctx.overrides)?;
    p.seed = ctx.seed;
    p.threads = ctx.threads;
    Ok(p)
}

fn bp_params(ctx: &Ctx) -> Result<BpParams> {
    let mut p: BpParams = resolve(&BpParams::default(), &ctx.overrides)?;
    p.seed = ctx.seed;
    p.threads = ctx.threads;
    Ok(p)
}

fn ga(ctx: &Ctx, a: &crate::SearchArgs) -> Result<()> {
    let m = model(&a.model)?;
    let d = data(&a.data, &m)?;
    let p = ga_params(ctx)?;
    let spec = m.weights.spec;
    let fit_ctx = build_hard_negatives(&m.weights, &AblationConfig::identity_for(&spec), &d, p.k1, p.k2, p.seed, p.threads)?;
    let out = evolve(&m.weights, &fit_ctx, &p)?;
    let cfg = out.best.to_config(&spec)?;
    ensure_parent(&a.out)?;
    cfg.save(&a.out)?;
    let hist = history_path(&a.out, a.history.as_ref());
    write_jsonl(&hist, &out.history)?;
    log::info!("ga: best fitness {:.5}, ablated {:?}", out.best_fitness, cfg.ablated_heads());

    let mut man = ctx.manifest("ga", &p)?;
    man.inputs = vec![a.model.clone(), a.data.clone()];
    man.outputs = vec![a.out.clone(), hist];
    man.summary = json!({
        "best_fitness": out.best_fitness,
        "ablated": cfg.ablated_heads(),
        "stop_reason": out.stop_reason,
        "thresholds": out.thresholds,
        "generations": out.history.len(),
        "total_evals": out.total_evals(),
        "total_skipped": out.total_skipped(),
    });
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn bp(ctx: &Ctx, a: &crate::BpArgs) -> Result<()> {
    let m = model(&a.model)?;
    let d = data(&a.data, &m)?;
    let p = bp_params(ctx)?;
    ensure_parent(&a.out)?;
    let out = match train_gating(&m.weights, &d, &p) {
        Ok(out) => out,
        Err(AatError::Diverged { epoch, last_good }) => {
            last_good.save(&a.out)?;
            return Err(AatError::Diverged { epoch, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    out.gating.save(&a.out)?;
    let hist = history_path(&a.out, a.history.as_ref());
    write_jsonl(&hist, &out.history)?;
    let mut outputs = vec![a.out.clone(), hist];
    if let Some(cp) = &a.config_out {
        ensure_parent(cp)?;
        export_config(&out.gating, a.binarize, a.threshold)?.save(cp)?;
        outputs.push(cp.clone());
    }

    let mut man = ctx.manifest("bp", &p)?;
    man.inputs = vec![a.model.clone(), a.data.clone()];
    man.outputs = outputs;
    man.summary = json!({
        "final_loss": out.history.last().map(|h| h.loss),
        "betas": out.gating.betas(),
        "polarization_by_layer": polarization_by_layer(&out.gating),
        "binarize": a.binarize,
        "threshold": a.threshold,
    });
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn eval(ctx: &Ctx, a: &crate::EvalArgs) -> Result<()> {
    let m = model(&a.model)?;
    let d = data(&a.data, &m)?;
    let cfg = config_for(a.config.as_deref(), &m)?;
    let [t2i, i2t] = evaluate(&m.weights, &d, &cfg, ctx.threads)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut outputs = Vec::new();
    for r in [&t2i, &i2t] {
        let p = a.out_dir.join(format!("{}.json", r.direction));
        write_json(&p, &r.to_file())?;
        outputs.push(p);
    }
    let mut man = ctx.manifest("eval", json!({ "ablated": cfg.ablated_heads() }))?;
    man.inputs = std::iter::once(a.model.clone()).chain(std::iter::once(a.data.clone())).chain(a.config.clone()).collect();
    man.outputs = outputs;
    man.write(&a.out_dir.join("eval.run.json"), ctx.started.elapsed())
}

fn stats(ctx: &Ctx, a: &crate::StatsArgs) -> Result<()> {
    let cfg = AblationConfig::load(&a.config).with_context(|| format!("loading config {}", a.config.display()))?;
    write_json(&a.out, &config_stats(&cfg))?;
    let mut man = ctx.manifest("stats", json!({}))?;
    man.inputs = vec![a.config.clone()];
    man.outputs = vec![a.out.clone()];
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn sweep_beta_cmd(ctx: &Ctx, a: &crate::SweepBetaArgs) -> Result<()> {
    let m = model(&a.model)?;
    let search = data(&a.search, &m)?;
    let test = data(&a.data, &m)?;
    let source = match &a.config {
        Some(p) => MaskSource::Fixed(config_for(Some(p), &m)?.ablated_mask()),
        None => MaskSource::NaiveJoint,
    };
    let sweep = sweep_beta(&m.weights, &search, &test, &source, &BETA_GRID, ctx.threads)?;
    write_json(&a.out, &sweep)?;
    let mut man = ctx.manifest("sweep-beta", json!({ "grid": BETA_GRID, "fixed_mask": a.config.is_some() }))?;
    man.inputs = [a.model.clone(), a.search.clone(), a.data.clone()].into_iter().chain(a.config.clone()).collect();
    man.outputs = vec![a.out.clone()];
    man.summary = json!({ "best_beta": sweep.best_beta });
    man.write(&path_for(&a.out), ctx.started.elapsed())
}

fn sweep_dsize_cmd(ctx: &Ctx, a: &crate::SweepDsizeArgs) -> Result<()> {
    let m = model(&a.model)?;
    let search = data(&a.search, &m)?;
    let test = data(&a.data, &m)?;
    let largest = DSIZE_GRID[DSIZE_GRID.len() - 1];
    if search.len() < largest {
        return Err(Invariant(format!("{} has {} pairs, the sweep needs {largest}", a.search.display(), search.len())).into());
    }
    let (gp, bpp) = (ga_params(ctx)?, bp_params(ctx)?);
    let method = match a.method {
        Method::Ga => SearchMethod::Ga,
        Method::Bp => SearchMethod::Bp,
    };
    let sweep = sweep_dsize(&m.weights, &search, &test, method, &DSIZE_GRID, &gp, &bpp)?;
    write_json(&a.out, &sweep)?;
    let params = match method {
        SearchMethod::Ga => serde_json::to_value(&gp)?,
        SearchMethod::Bp => serde_json::to_value(&bpp)?,
    };
    let mut man = ctx.manifest("sweep-dsize", params)?;
    man.inputs = vec![a.model.clone(), a.search.clone(), a.data.clone()];
    man.outputs = vec![a.out.clone()];
    man.summary = json!({ "method": method, "sizes": DSIZE_GRID });
    man.write(&path_for(&a.out), ctx.started.elapsed())
}
