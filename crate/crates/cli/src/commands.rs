use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use scatterfusion::baselines::{persistence, LinearBaseline};
use scatterfusion::bench::{bench_forward, DOUBLING_BOUND};
use scatterfusion::checkpoint::Checkpoint;
use scatterfusion::dataio::{
    load_csv, synth as make_synth, windows, write_predictions, Dataset, Split, SplitSpec, Splits, SynthParams,
    TimeSeriesWindow,
};
use scatterfusion::diffcore::Tensor;
use scatterfusion::filterbank::FilterBank;
use scatterfusion::forecaster::{Ablation, Forecaster, ModelConfig};
use scatterfusion::hstm::scattering;
use scatterfusion::invariance::{run_invariance, InvarianceConfig};
use scatterfusion::trainer::{delta_table, evaluate as eval_model, evaluate_with, Trainer, VariantRow};
use scatterfusion::tsr::{decompose as tsr_decompose, detect_period};
use scatterfusion::{Error, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{
    BenchArgs, Common, DataArgs, DecomposeArgs, EvaluateArgs, InvarianceArgs, ModelFlags, PredictArgs, ScatterArgs,
    SynthArgs, TrainArgs, TrainFlags,
};

const CHECKPOINT_FILE: &str = "model.ckpt";
const STATE_FILE: &str = "state.ckpt";

fn prepare(common: &Common) -> Result<RunConfig> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    let cfg = RunConfig::load(common.config.as_deref())?;
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn load_data(args: &DataArgs, cfg: &mut RunConfig) -> Result<Dataset> {
    if args.timestamp_column.is_some() {
        cfg.data.timestamp_column = args.timestamp_column.clone();
    }
    if let Some(p) = args.on_missing {
        cfg.data.on_missing = p;
    }
    load_csv(&args.data, &cfg.data.csv_options())
}

fn apply_model_flags(m: &mut ModelConfig, f: &ModelFlags) {
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = f.$field.clone() {
                m.$field = v;
            }
        )*};
    }
    set!(input_len, horizon, d_model, d_attn, j_max, strides, mrta_layers, seed);
    if f.period.is_some() {
        m.period = f.period;
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags, seed: Option<u64>) {
    let t = &mut cfg.train;
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = f.$field {
                t.$field = v;
            }
        )*};
    }
    set!(
        epochs,
        batch_size,
        lr_max,
        lr_min,
        weight_decay,
        patience,
        window_stride,
        eval_stride
    );
    if f.strict_boundary {
        t.strict_boundary = true;
    }
    if let Some(s) = seed {
        t.seed = s;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn split_windows(
    data: &Dataset,
    split: Split,
    spec: &SplitSpec,
    input_len: usize,
    horizon: usize,
    stride: usize,
    strict: bool,
) -> Result<Vec<TimeSeriesWindow>> {
    if stride == 0 {
        return Err(Error::Config("--stride must be >= 1".into()));
    }
    let splits = Splits::new(data.len(), spec)?;
    let wins = windows(
        splits.window_source(split, input_len, strict),
        input_len,
        horizon,
        stride,
    );
    if wins.is_empty() {
        return Err(Error::Data(format!(
            "{split} split has no window of length {}",
            input_len + horizon
        )));
    }
    Ok(wins)
}

pub fn scatter(args: ScatterArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    let data = load_data(&args.data, &mut cfg)?;
    let mut bank = FilterBank::new(args.j_max, data.len(), args.kernel_len)?;
    if let Some(path) = &args.checkpoint {
        let model = Checkpoint::load(path)?.model()?;
        if model.config().kernel_len != args.kernel_len {
            return Err(Error::Config(format!(
                "checkpoint kernels have length {}, --kernel-len is {}",
                model.config().kernel_len,
                args.kernel_len
            )));
        }
        for (j, g) in model.kernels().into_iter().enumerate().take(args.j_max as usize) {
            bank.set_kernel(j as u32 + 1, g)?;
        }
    }
    let mut manifest = RunManifest::new(
        "scatter",
        json!({"J": args.j_max, "kernel_len": args.kernel_len, "subsample": !args.full_length, "data": cfg.data}),
        None,
        args.common.threads,
    );
    manifest.input(&args.data.data)?;
    if let Some(p) = &args.checkpoint {
        manifest.input(p)?;
    }

    let out = &args.common.out;
    let mut w = csv_writer(&out.join("scattering.csv"))?;
    w.write_record(["channel", "order", "j1", "j2", "index", "value"])?;
    let mut paths = 0;
    for (c, name) in data.columns.iter().enumerate() {
        let coeffs = scattering(&data.values.column(c), &bank, !args.full_length)?;
        paths = coeffs.num_paths();
        let mut rows: Vec<(u8, u32, u32, &Tensor)> = vec![(0, 0, 0, &coeffs.s0)];
        rows.extend(coeffs.s1.iter().enumerate().map(|(j, t)| (1, j as u32 + 1, 0, t)));
        rows.extend(
            coeffs
                .s2
                .iter()
                .zip(&coeffs.path_index)
                .map(|(t, &(a, b))| (2, a, b, t)),
        );
        for (order, j1, j2, t) in rows {
            for (i, v) in t.data().iter().enumerate() {
                w.write_record([
                    name.clone(),
                    order.to_string(),
                    j1.to_string(),
                    j2.to_string(),
                    i.to_string(),
                    format!("{v:?}"),
                ])?;
            }
        }
    }
    w.flush()?;
    manifest.artifact("scattering.csv");
    if args.dump_filters {
        let mut w = csv_writer(&out.join("filters.csv"))?;
        w.write_record(["scale", "index", "re", "im"])?;
        for (j, i, re, im) in bank.dump_rows()? {
            w.write_record([j.to_string(), i.to_string(), format!("{re:?}"), format!("{im:?}")])?;
        }
        w.flush()?;
        manifest.artifact("filters.csv");
    }
    manifest.write(out)?;
    println!(
        "{} channel(s), {paths} paths per channel, J = {} -> {}",
        data.channels(),
        args.j_max,
        out.join("scattering.csv").display()
    );
    Ok(())
}

pub fn decompose(args: DecomposeArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    let data = load_data(&args.data, &mut cfg)?;
    let period = match args.period {
        Some(p) => p,
        None => detect_period(&data.values, args.max_lag.min(data.len().saturating_sub(3)))?,
    };
    let parts = tsr_decompose(&data.values, period)?;
    let out = &args.common.out;
    let mut w = csv_writer(&out.join("components.csv"))?;
    let mut header = vec!["t".to_string()];
    for name in &data.columns {
        for part in ["trend", "seasonal", "residual"] {
            header.push(format!("{name}_{part}"));
        }
    }
    w.write_record(&header)?;
    for t in 0..data.len() {
        let mut rec = vec![t.to_string()];
        for c in 0..data.channels() {
            for part in [&parts.trend, &parts.seasonal, &parts.residual] {
                rec.push(format!("{:?}", part.at(t, c)));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut manifest = RunManifest::new(
        "decompose",
        json!({"period": period, "period_detected": args.period.is_none(), "max_lag": args.max_lag, "data": cfg.data}),
        None,
        args.common.threads,
    );
    manifest.input(&args.data.data)?;
    manifest.artifact("components.csv");
    manifest.write(out)?;
    println!("period {period} -> {}", out.join("components.csv").display());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    let data = load_data(&args.data, &mut cfg)?;
    let out = args.common.out.clone();
    let mut trainer = match &args.resume {
        Some(path) => {
            let trainer = Trainer::resume(Checkpoint::load(path)?, &data)?;
            cfg.model = trainer.model().config().clone();
            cfg.train = trainer.progress().config.clone();
            trainer
        }
        None => {
            apply_model_flags(&mut cfg.model, &args.model);
            apply_train_flags(&mut cfg, &args.train, args.model.seed);
            if let Some(a) = args.ablate {
                cfg.model.apply_ablation(a);
            }
            cfg.model.channels = data.channels();
            Trainer::new(Forecaster::new(cfg.model.clone())?, &data, cfg.train.clone())?
        }
    };
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let log = OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(out.join("train_log.jsonl"))?;
    trainer.set_log(Box::new(BufWriter::new(log)));

    let total = trainer.total_steps();
    while trainer.step()?.is_some() {
        if trainer.progress().batch == 0 {
            trainer.checkpoint()?.save(&out.join(STATE_FILE))?;
            if let Some(e) = trainer.progress().curve.last() {
                println!(
                    "epoch {:>3}  step {:>6}/{total}  train loss {:.5}  val mse {:.5}",
                    e.epoch,
                    trainer.progress().step,
                    e.train_loss,
                    e.val_mse
                );
            }
        }
    }
    let splits = trainer.splits().clone();
    let outcome = trainer.finish()?;
    let model_cfg = outcome.model.config().clone();
    Checkpoint::from_model(&outcome.model, outcome.report.steps).save(&out.join(CHECKPOINT_FILE))?;

    let (ts, tp) = (model_cfg.input_len, model_cfg.horizon);
    let test = windows(
        splits.window_source(Split::Test, ts, cfg.train.strict_boundary),
        ts,
        tp,
        cfg.train.eval_stride,
    );
    let train_windows = windows(splits.train.clone(), ts, tp, 1);
    let (p_mse, p_mae) = evaluate_with(&data, &test, |x| Ok(persistence(x, tp)))?;
    let ols = LinearBaseline::fit(&data, &train_windows)?;
    let (l_mse, l_mae) = evaluate_with(&data, &test, |x| ols.predict(x))?;
    let metrics = json!({
        "model": outcome.report,
        "baselines": {
            "persistence": {"split": "test", "mse": p_mse, "mae": p_mae},
            "linear": {"split": "test", "mse": l_mse, "mae": l_mae},
        },
    });
    write_json(&out.join("metrics.json"), &metrics)?;

    let mut manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg)?,
        Some(model_cfg.seed),
        args.common.threads,
    );
    manifest.input(&args.data.data)?;
    if let Some(p) = &args.resume {
        manifest.input(p)?;
    }
    for a in [
        CHECKPOINT_FILE,
        STATE_FILE,
        "metrics.json",
        "train_log.jsonl",
        "config.toml",
    ] {
        manifest.artifact(a);
    }
    manifest.write(&out)?;
    for m in &outcome.report.splits {
        println!(
            "{:<5} mse {:.5}  mae {:.5}  ({} windows)",
            m.split, m.mse, m.mae, m.windows
        );
    }
    println!("baselines on test: persistence mse {p_mse:.5}, linear mse {l_mse:.5}");
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    let data = load_data(&args.data, &mut cfg)?;
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let (ts, tp) = (model.config().input_len, model.config().horizon);
    let strict = args.strict_boundary || cfg.train.strict_boundary;
    let wins = split_windows(&data, args.split, &cfg.train.split, ts, tp, args.stride, strict)?;
    let eval = eval_model(&model, &data, &wins)?;
    let out = &args.common.out;
    write_predictions(
        BufWriter::new(File::create(out.join("predictions.csv"))?),
        &wins,
        &eval.targets,
        &eval.predictions,
        &data.columns,
    )?;
    let mut manifest = RunManifest::new(
        "predict",
        json!({"model": model.config(), "split": args.split, "stride": args.stride, "strict_boundary": strict, "split_spec": cfg.train.split, "data": cfg.data}),
        Some(model.config().seed),
        args.common.threads,
    );
    manifest.input(&args.data.data)?;
    manifest.input(&args.checkpoint)?;
    manifest.artifact("predictions.csv");
    manifest.write(out)?;
    println!("{} windows, mse {:.5}, mae {:.5}", wins.len(), eval.mse, eval.mae);
    Ok(())
}

/// Reference label for a checkpoint: its single disabled block, if any.
fn variant_label(config: &ModelConfig, fallback: &Path) -> String {
    let off: Vec<Ablation> = Ablation::ALL
        .into_iter()
        .filter(|a| match a {
            Ablation::Hstm => !config.use_hstm,
            Ablation::Safe => !config.use_safe,
            Ablation::Mrta => !config.use_mrta,
            Ablation::Tsr => !config.use_tsr_loss,
        })
        .collect();
    match off.as_slice() {
        [] => "Full ScatterFusion".to_string(),
        [a] => a.label().to_string(),
        _ => fallback.display().to_string(),
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    let data = load_data(&args.data, &mut cfg)?;
    let strict = args.strict_boundary || cfg.train.strict_boundary;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    let mut first: Option<Forecaster> = None;
    for path in &args.checkpoint {
        let model = Checkpoint::load(path)?.model()?;
        let (ts, tp) = (model.config().input_len, model.config().horizon);
        let wins = split_windows(&data, args.split, &cfg.train.split, ts, tp, args.stride, strict)?;
        let eval = eval_model(&model, &data, &wins)?;
        let label = variant_label(model.config(), path);
        details.push(json!({"label": label, "checkpoint": path, "windows": wins.len(), "mse": eval.mse, "mae": eval.mae, "alpha": eval.alpha}));
        rows.push(VariantRow {
            label,
            mse: eval.mse,
            mae: eval.mae,
        });
        first.get_or_insert(model);
    }
    let reference = first.expect("at least one checkpoint is required");
    let (ts, tp) = (reference.config().input_len, reference.config().horizon);
    let wins = split_windows(&data, args.split, &cfg.train.split, ts, tp, args.stride, strict)?;
    for a in &args.ablate {
        let eval = eval_model(&reference.bypass(*a)?, &data, &wins)?;
        let label = format!("{} [bypassed]", a.label());
        details.push(json!({"label": label, "bypassed": a, "windows": wins.len(), "mse": eval.mse, "mae": eval.mae}));
        rows.push(VariantRow {
            label,
            mse: eval.mse,
            mae: eval.mae,
        });
    }
    if args.baselines {
        let splits = Splits::new(data.len(), &cfg.train.split)?;
        let ols = LinearBaseline::fit(&data, &windows(splits.train.clone(), ts, tp, 1))?;
        for (label, (mse, mae)) in [
            ("Persistence", evaluate_with(&data, &wins, |x| Ok(persistence(x, tp)))?),
            (
                "Linear (least squares)",
                evaluate_with(&data, &wins, |x| ols.predict(x))?,
            ),
        ] {
            details.push(json!({"label": label, "windows": wins.len(), "mse": mse, "mae": mae}));
            rows.push(VariantRow {
                label: label.to_string(),
                mse,
                mae,
            });
        }
    }

    let stem = args
        .data
        .data
        .file_stem()
        .map_or("data".into(), |s| s.to_string_lossy().into_owned());
    let table = delta_table(&rows, &format!("{stem} ({tp})"));
    let out = &args.common.out;
    fs::write(out.join("ablation.txt"), &table)?;
    let mut w = csv_writer(&out.join("ablation.csv"))?;
    w.write_record(["label", "mse", "mae", "mse_delta_pct"])?;
    for r in &rows {
        let delta = 100.0 * (r.mse - rows[0].mse) / rows[0].mse;
        w.write_record([
            r.label.clone(),
            format!("{:?}", r.mse),
            format!("{:?}", r.mae),
            format!("{delta:?}"),
        ])?;
    }
    w.flush()?;
    write_json(
        &out.join("metrics.json"),
        &json!({"split": args.split, "rows": details}),
    )?;
    let mut manifest = RunManifest::new(
        "evaluate",
        json!({"split": args.split, "stride": args.stride, "strict_boundary": strict, "ablate": args.ablate, "baselines": args.baselines, "split_spec": cfg.train.split, "data": cfg.data}),
        None,
        args.common.threads,
    );
    manifest.input(&args.data.data)?;
    for p in &args.checkpoint {
        manifest.input(p)?;
    }
    for a in ["metrics.json", "ablation.txt", "ablation.csv"] {
        manifest.artifact(a);
    }
    manifest.write(out)?;
    print!("{table}");
    Ok(())
}

pub fn check_invariance(args: InvarianceArgs) -> Result<()> {
    prepare(&args.common)?;
    let config = InvarianceConfig {
        signal_len: args.length,
        num_signals: args.signals,
        seed: args.seed,
        shift: args.shift,
        j_values: args.scales.0.clone(),
        ..InvarianceConfig::default()
    };
    let kernels = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.model()?.kernels()),
        None => None,
    };
    let config = InvarianceConfig {
        kernel_len: kernels
            .as_ref()
            .and_then(|k| k.first())
            .map_or(config.kernel_len, Tensor::len),
        ..config
    };
    let report = run_invariance(&config, kernels.as_deref())?;
    let out = &args.common.out;
    write_json(&out.join("invariance.json"), &report)?;
    let mut manifest = RunManifest::new(
        "check-invariance",
        serde_json::to_value(&config)?,
        Some(args.seed),
        args.common.threads,
    );
    if let Some(p) = &args.checkpoint {
        manifest.input(p)?;
    }
    manifest.artifact("invariance.json");
    manifest.write(out)?;

    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!(
        "translation (shift {}), distance per J {:?}:",
        config.shift, config.j_values
    );
    for row in &report.translation {
        let d: Vec<String> = row.distances.iter().map(|v| format!("{v:.3e}")).collect();
        println!("  signal {:>2}: {}  monotone={}", row.signal, d.join(" "), row.monotone);
    }
    println!(
        "  monotone {}/{}, mean d(J+1)/d(J) {:.3} -> {}",
        report.monotone_count,
        report.translation.len(),
        report.mean_decay_ratio,
        verdict(report.translation_pass)
    );
    println!("deformation (J = {}), eps {:?}:", config.deformation_j, config.epsilons);
    for row in &report.deformation {
        println!("  signal {:>2}: log-log slope {:.3}", row.signal, row.log_log_slope);
    }
    println!(
        "  slopes within [{}, {}] {}/{} -> {}",
        report.slope_bounds.0,
        report.slope_bounds.1,
        report.slope_pass_count,
        report.deformation.len(),
        verdict(report.deformation_pass)
    );
    Ok(())
}

pub fn bench(args: BenchArgs) -> Result<()> {
    let mut cfg = prepare(&args.common)?;
    apply_model_flags(&mut cfg.model, &args.model);
    cfg.model.channels = args.channels;
    let rows = bench_forward(&cfg.model, &args.lengths, args.runs)?;
    let out = &args.common.out;
    let mut w = csv_writer(&out.join("bench.csv"))?;
    w.write_record(["length", "median_ms", "ratio", "pass"])?;
    println!(
        "{:>7}  {:>11}  {:>7}  doubling <= {DOUBLING_BOUND}",
        "length", "median ms", "ratio"
    );
    for r in &rows {
        let ratio = r.ratio.map_or(String::new(), |x| format!("{x:.3}"));
        let pass = r
            .pass
            .map_or(String::new(), |p| if p { "PASS".into() } else { "FAIL".into() });
        w.write_record([
            r.length.to_string(),
            format!("{:?}", r.median_ms),
            ratio.clone(),
            pass.clone(),
        ])?;
        println!("{:>7}  {:>11.3}  {:>7}  {pass}", r.length, r.median_ms, ratio);
    }
    w.flush()?;
    write_json(&out.join("bench.json"), &rows)?;
    let mut manifest = RunManifest::new(
        "bench",
        json!({"model": cfg.model, "lengths": args.lengths, "runs": args.runs}),
        Some(cfg.model.seed),
        args.common.threads,
    );
    manifest.artifact("bench.csv");
    manifest.artifact("bench.json");
    manifest.write(out)?;
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    prepare(&args.common)?;
    let defaults = SynthParams::default();
    let params = SynthParams {
        channels: args.channels,
        period: args.period.unwrap_or(defaults.period),
        amplitude: args.amplitude.unwrap_or(defaults.amplitude),
        slope: args.slope.unwrap_or(defaults.slope),
        noise: args.noise.unwrap_or(defaults.noise),
        ..defaults
    };
    let data = make_synth(args.kind, &params, args.n, args.seed)?;
    let out = &args.common.out;
    data.write_csv(BufWriter::new(File::create(out.join("data.csv"))?))?;
    let mut manifest = RunManifest::new(
        "synth",
        json!({"kind": args.kind, "n": args.n, "params": params}),
        Some(args.seed),
        args.common.threads,
    );
    manifest.artifact("data.csv");
    manifest.write(out)?;
    println!(
        "{} rows x {} channels -> {}",
        args.n,
        args.channels,
        out.join("data.csv").display()
    );
    Ok(())
}
