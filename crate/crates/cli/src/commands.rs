use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use tppdiff::checkpoint::{self, SaveRequest};
use tppdiff::denoiser::DenoisingModel;
use tppdiff::diffusion::window_key;
use tppdiff::evaluation::{self, MetricsReport};
use tppdiff::eventdata::{self, DatasetManifest, EventSequence, PredictionWindow};
use tppdiff::rng::derive_seed;
use tppdiff::training::{self, BestSnapshot, EpochLog, TrainState};

use crate::config::RunConfig;

/// Normalized corpus with its splits cut into windows.
pub struct Prepared {
    pub manifest: DatasetManifest,
    pub dataset_sha256: String,
    pub train: Vec<PredictionWindow>,
    pub val: Vec<PredictionWindow>,
    pub test: Vec<PredictionWindow>,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn core<T>(r: tppdiff::Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!("{e}"))
}

fn provenance(cfg: &RunConfig, dataset_sha256: &str) -> Value {
    json!({
        "config": cfg.to_json(),
        "config_sha256": cfg.hash(),
        "dataset_sha256": dataset_sha256,
    })
}

fn ensure_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let dataset = PathBuf::from(&cfg.dataset);
    if let Some(dir) = dataset.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let model = cfg.hawkes()?;
    let seqs = core(eventdata::hawkes_generate(
        &model,
        cfg.num_sequences,
        cfg.derived_seed("gen"),
    ))?;
    core(eventdata::write_jsonl(&dataset, &seqs, Some(cfg.num_marks)))
        .with_context(|| format!("writing {}", dataset.display()))?;

    let mut normalized = seqs.clone();
    let scale = core(eventdata::normalize_times(&mut normalized))?;
    let manifest = DatasetManifest {
        name: dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        num_marks: cfg.num_marks,
        time_scale: scale,
        splits: eventdata::split_sequences(seqs.len(), cfg.derived_seed("split")),
        source: dataset.display().to_string(),
    };
    core(manifest.save(&manifest_path(&dataset)))?;
    let hash = file_sha256(&dataset)?;
    let mut info = provenance(cfg, &hash);
    info["hawkes"] = serde_json::to_value(&model)?;
    write_json(&dataset.with_extension("gen.json"), &info)?;

    let lens: Vec<usize> = seqs.iter().map(EventSequence::len).collect();
    let total: usize = lens.iter().sum();
    let mut counts = vec![0usize; cfg.num_marks];
    for s in &seqs {
        for &m in &s.marks {
            counts[m] += 1;
        }
    }
    println!("sequences: {}", seqs.len());
    println!(
        "events: {total} (mean length {:.2}, min {}, max {})",
        total as f64 / seqs.len().max(1) as f64,
        lens.iter().min().unwrap_or(&0),
        lens.iter().max().unwrap_or(&0)
    );
    println!("marks: K={}", cfg.num_marks);
    for (k, c) in counts.iter().enumerate() {
        println!("  mark {k}: {c} ({:.2}%)", 100.0 * *c as f64 / total.max(1) as f64);
    }
    println!("time scale (T_max/100): {scale}");
    println!("wrote {} ({hash})", dataset.display());
    Ok(())
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = PathBuf::from(&cfg.dataset);
    if !dataset.exists() {
        bail!("dataset {} does not exist (run `tppdiff gen` first)", dataset.display());
    }
    let (mut seqs, mut manifest) = core(eventdata::load_jsonl(&dataset, None))?;
    if seqs.is_empty() {
        bail!("dataset {} holds no sequences", dataset.display());
    }
    manifest.time_scale = core(eventdata::normalize_times(&mut seqs))?;
    let mp = manifest_path(&dataset);
    manifest.splits = if mp.exists() {
        let stored = core(DatasetManifest::load(&mp))?;
        if stored.num_marks > manifest.num_marks {
            manifest.num_marks = stored.num_marks;
        }
        stored.splits
    } else {
        eventdata::split_sequences(seqs.len(), cfg.derived_seed("split"))
    };
    let (l, lp) = (cfg.history_len, cfg.target_len);
    let s = &manifest.splits;
    let train = core(eventdata::windows_for(&seqs, &s.train, l, lp, cfg.train_stride))?;
    let val = core(eventdata::windows_for(&seqs, &s.val, l, lp, cfg.eval_stride()))?;
    let test = core(eventdata::windows_for(&seqs, &s.test, l, lp, cfg.eval_stride()))?;
    Ok(Prepared {
        manifest,
        dataset_sha256: file_sha256(&dataset)?,
        train,
        val,
        test,
    })
}

/// First differing field between two serializable values, as `key: a vs b`.
fn first_difference(stored: &Value, wanted: &Value) -> Option<String> {
    let (a, b) = (stored.as_object()?, wanted.as_object()?);
    a.iter().find_map(|(k, v)| {
        let w = b.get(k).unwrap_or(&Value::Null);
        (v != w).then(|| format!("{k}: checkpoint has {v}, config wants {w}"))
    })
}

fn load_checkpoint(cfg: &RunConfig, path: &Path, num_marks: usize) -> Result<checkpoint::Checkpoint> {
    let ck = core(checkpoint::load(path)).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let wanted = serde_json::to_value(cfg.denoiser_config_for(num_marks))?;
    let stored = serde_json::to_value(&ck.manifest.config)?;
    if let Some(diff) = first_difference(&stored, &wanted) {
        bail!("checkpoint {} does not match the config: {diff}", path.display());
    }
    let schedule = core(cfg.schedule())?;
    if ck.manifest.schedule.fingerprint != schedule.fingerprint() {
        bail!(
            "checkpoint {} was trained with a different noise schedule (steps/beta_1/beta_n)",
            path.display()
        );
    }
    Ok(ck)
}

/// Provenance plus `extra` fields, kept as a checkpoint's `run` record.
fn run_record(cfg: &RunConfig, data: &Prepared, extra: Value) -> Value {
    let mut run = provenance(cfg, &data.dataset_sha256);
    if let (Value::Object(dst), Value::Object(src)) = (&mut run, extra) {
        dst.extend(src);
    }
    run
}

fn write_checkpoint(path: &Path, req: SaveRequest<'_>) -> tppdiff::Result<()> {
    checkpoint::save(path, req)
        .map_err(|e| tppdiff::Error::Validation(format!("writing checkpoint {}: {e}", path.display())))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    let out = ensure_out(cfg)?;
    let k = data.manifest.num_marks;
    let tc = cfg.train_config();
    let schedule = core(cfg.schedule())?;
    let last_path = out.join("last.json");
    let best_path = cfg.checkpoint_path();

    let mut state = if cfg.resume && last_path.exists() {
        let ck = load_checkpoint(cfg, &last_path, k)?;
        let opt = ck
            .optimizer
            .ok_or_else(|| anyhow!("{} holds no optimizer state", last_path.display()))?;
        let logs: Vec<EpochLog> = serde_json::from_value(ck.manifest.run["logs"].clone()).unwrap_or_default();
        let best = if best_path.exists() {
            let b = load_checkpoint(cfg, &best_path, k)?;
            b.manifest.metrics.clone().map(|metrics| BestSnapshot {
                epoch: b.manifest.run["best_epoch"].as_u64().unwrap_or(0) as usize,
                score: b.manifest.run["score"].as_f64().unwrap_or(f64::INFINITY),
                metrics,
                store: b.model.store,
            })
        } else {
            None
        };
        log::info!("resuming from epoch {}", ck.manifest.epoch);
        TrainState {
            model: ck.model,
            opt,
            epoch: ck.manifest.epoch,
            best,
            logs,
        }
    } else {
        let model = core(DenoisingModel::new(
            cfg.denoiser_config_for(k),
            cfg.derived_seed("init"),
        ))?;
        core(TrainState::new(model, &tc))?
    };
    let log_path = out.join("train_log.csv");
    let mut saved_best: Option<usize> = state.best.as_ref().map(|b| b.epoch);
    let result = training::train_loop(&mut state, &schedule, &data.train, &data.val, &tc, |st| {
        write_checkpoint(
            &last_path,
            SaveRequest {
                model: &st.model,
                schedule: &schedule,
                epoch: st.epoch,
                metrics: None,
                optimizer: Some(&st.opt),
                run: run_record(cfg, &data, json!({ "logs": st.logs })),
            },
        )?;
        training::write_log_csv(&st.logs, &log_path)?;
        if let Some(b) = &st.best {
            if saved_best != Some(b.epoch) {
                let mut m = st.model.clone();
                m.store = b.store.clone();
                write_checkpoint(
                    &best_path,
                    SaveRequest {
                        model: &m,
                        schedule: &schedule,
                        epoch: b.epoch + 1,
                        metrics: Some(&b.metrics),
                        optimizer: None,
                        run: run_record(cfg, &data, json!({ "best_epoch": b.epoch, "score": b.score })),
                    },
                )?;
                saved_best = Some(b.epoch);
            }
        }
        Ok(())
    });
    core(result).context("training failed")?;
    let best = state
        .best
        .as_ref()
        .ok_or_else(|| anyhow!("training ran no validation"))?;
    println!(
        "best epoch {}: val mae {:.4}, val acc {:.4} ({} epochs, {} steps)",
        best.epoch, best.metrics.mae, best.metrics.acc, state.epoch, state.opt.step
    );
    println!("wrote {}", best_path.display());
    Ok(())
}

fn write_csv_with_header(path: &Path, header: &Value, body: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# {}", serde_json::to_string(header)?)?;
    for line in body {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let data = prepare(cfg)?;
    let out = ensure_out(cfg)?;
    let ck = load_checkpoint(cfg, &cfg.checkpoint_path(), data.manifest.num_marks)?;
    let schedule = core(cfg.schedule())?;
    if data.test.is_empty() {
        bail!(
            "test split has no windows of length {}",
            cfg.history_len + cfg.target_len
        );
    }
    let report = core(evaluation::evaluate(
        &ck.model,
        &schedule,
        &data.test,
        &cfg.eval_config(),
    ))?
    .with_scale(data.manifest.time_scale);
    let baselines = core(evaluation::naive_baselines(&data.test))?;
    let scale = data.manifest.time_scale;
    let header = provenance(cfg, &data.dataset_sha256);
    let mut doc = header.clone();
    doc["model"] = serde_json::to_value(&report)?;
    doc["baselines"] = json!({
        "mean_interval": baselines.mean_interval.clone().with_scale(scale),
        "last_interval": baselines.last_interval.clone().with_scale(scale),
    });
    doc["time_scale"] = json!(scale);
    write_json(&out.join("metrics.json"), &doc)?;

    let mut rows =
        vec!["step,mae,acc,mean_interval_mae,mean_interval_acc,last_interval_mae,last_interval_acc".to_string()];
    for i in 0..cfg.target_len {
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            i + 1,
            report.per_step_mae[i],
            report.per_step_acc[i],
            baselines.mean_interval.per_step_mae[i],
            baselines.mean_interval.per_step_acc[i],
            baselines.last_interval.per_step_mae[i],
            baselines.last_interval.per_step_acc[i],
        ));
    }
    write_csv_with_header(&out.join("per_step.csv"), &header, &rows)?;
    let curve = core(evaluation::horizon_curve(&report, &cfg.horizons()))?;
    let mut rows = vec!["horizon,mae,acc".to_string()];
    rows.extend(curve.iter().map(|r| format!("{},{},{}", r.horizon, r.mae, r.acc)));
    write_csv_with_header(&out.join("horizon.csv"), &header, &rows)?;

    println!("{:<16} {:>10} {:>8}", "predictor", "mae", "acc");
    for (name, r) in [
        ("model", &report),
        ("mean-interval", &baselines.mean_interval),
        ("last-interval", &baselines.last_interval),
    ] {
        println!("{name:<16} {:>10.4} {:>8.4}", r.mae, r.acc);
    }
    println!(
        "{} test windows; wrote {}",
        report.n_windows,
        out.join("metrics.json").display()
    );
    Ok(report)
}

pub fn cmd_sample(cfg: &RunConfig) -> Result<()> {
    let data = prepare(cfg)?;
    let out = ensure_out(cfg)?;
    let ck = load_checkpoint(cfg, &cfg.checkpoint_path(), data.manifest.num_marks)?;
    let schedule = core(cfg.schedule())?;
    let ec = cfg.eval_config();
    let preds = core(evaluation::predict(&ck.model, &schedule, &data.test, &ec))?;
    let seqs: Vec<EventSequence> = preds.iter().map(|p| p.sequence.clone()).collect();
    core(eventdata::write_jsonl(
        &out.join("samples.jsonl"),
        &seqs,
        Some(data.manifest.num_marks),
    ))?;
    let mut meta = std::io::BufWriter::new(std::fs::File::create(out.join("samples.meta.jsonl"))?);
    writeln!(
        meta,
        "{}",
        serde_json::to_string(&provenance(cfg, &data.dataset_sha256))?
    )?;
    for (i, (w, p)) in data.test.iter().zip(&preds).enumerate() {
        let seeds: Vec<u64> = (0..ec.samples as u64)
            .map(|s| derive_seed(ec.reverse.seed, "sample", &[window_key(w), s]))
            .collect();
        let rec = json!({
            "window": i,
            "anchor": w.anchor,
            "seeds": seeds,
            "clamp_start": ec.reverse.clamp_start,
            "steps": cfg.steps,
            "clipped": p.clipped,
            "time_scale": data.manifest.time_scale,
        });
        writeln!(meta, "{}", serde_json::to_string(&rec)?)?;
    }
    meta.flush()?;
    println!(
        "sampled {} windows into {}",
        seqs.len(),
        out.join("samples.jsonl").display()
    );
    Ok(())
}

/// `key=v1,v2,...` grid axes.
pub fn parse_grid(specs: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    if specs.is_empty() {
        return Ok(vec![
            ("n_blocks".into(), vec!["1".into(), "2".into(), "3".into()]),
            (
                "weight_decay".into(),
                vec!["0".into(), "0.001".into(), "0.01".into(), "0.1".into()],
            ),
        ]);
    }
    specs
        .iter()
        .map(|s| {
            let (k, v) = crate::config::parse_assignment(s)?;
            let values: Vec<String> = v
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect();
            if values.is_empty() {
                bail!("grid axis {k} has no values");
            }
            Ok((k, values))
        })
        .collect()
}

/// Grid cells in row-major order with duplicates (equal config hash)
/// removed; each cell's output goes to `<out>/cells/<hash prefix>`.
pub fn grid_cells(cfg: &RunConfig, grid: &[(String, Vec<String>)]) -> Result<Vec<(Vec<String>, RunConfig)>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for (_, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    let mut seen = std::collections::HashSet::new();
    let mut cells = Vec::new();
    for combo in combos {
        let assignments: Vec<(String, String)> =
            grid.iter().map(|(k, _)| k.clone()).zip(combo.iter().cloned()).collect();
        let cell = cfg.apply(&assignments)?;
        let hash = cell.hash();
        if !seen.insert(hash.clone()) {
            continue;
        }
        let cell = cell.apply(&[
            (
                "out".into(),
                cfg.out_dir().join("cells").join(&hash[..12]).display().to_string(),
            ),
            ("checkpoint".into(), "none".into()),
        ])?;
        cells.push((combo, cell));
    }
    if cells.is_empty() {
        bail!("empty grid");
    }
    Ok(cells)
}

/// Writes a config as a flat `key = value` file readable by `--config`.
pub fn write_flat_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Value::Object(map) = cfg.to_json() {
        for (k, v) in map {
            let text = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s,
                Value::Array(a) => a.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                other => other.to_string(),
            };
            writeln!(f, "{k} = {text}")?;
        }
    }
    f.flush()?;
    Ok(())
}

fn cell_metrics(cell: &RunConfig) -> Result<(f64, f64)> {
    let path = cell.out_dir().join("metrics.json");
    let doc: Value =
        serde_json::from_str(&std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?)?;
    let mae = doc["model"]["mae"]
        .as_f64()
        .ok_or_else(|| anyhow!("no mae in {}", path.display()))?;
    let acc = doc["model"]["acc"]
        .as_f64()
        .ok_or_else(|| anyhow!("no acc in {}", path.display()))?;
    Ok((mae, acc))
}

fn run_cell_process(exe: &Path, cfg_file: &Path) -> Result<std::process::Child> {
    let script = format!(
        "\"{exe}\" --config \"{cfg}\" train && \"{exe}\" --config \"{cfg}\" eval",
        exe = exe.display(),
        cfg = cfg_file.display()
    );
    Command::new("sh")
        .arg("-c")
        .arg(script)
        .stdout(std::process::Stdio::null())
        .spawn()
        .context("spawning sweep cell")
}

pub fn cmd_sweep(cfg: &RunConfig, grid_specs: &[String], jobs: usize) -> Result<()> {
    let grid = parse_grid(grid_specs)?;
    let cells = grid_cells(cfg, &grid)?;
    let out = ensure_out(cfg)?;
    let mut status: Vec<Result<(f64, f64)>> = Vec::with_capacity(cells.len());
    if jobs <= 1 {
        for (combo, cell) in &cells {
            log::info!("sweep cell {combo:?}");
            std::fs::create_dir_all(cell.out_dir())?;
            write_flat_config(cell, &cell.out_dir().join("run.cfg"))?;
            let r = cmd_train(cell).and_then(|_| cmd_eval(cell)).map(|r| (r.mae, r.acc));
            if let Err(e) = &r {
                log::error!("cell {combo:?} failed: {e:#}");
            }
            status.push(r);
        }
    } else {
        let exe = std::env::current_exe()?;
        let mut pending: Vec<usize> = (0..cells.len()).rev().collect();
        let mut running: Vec<(usize, std::process::Child)> = Vec::new();
        let mut outcome: Vec<Option<Result<(f64, f64)>>> = (0..cells.len()).map(|_| None).collect();
        while !pending.is_empty() || !running.is_empty() {
            while running.len() < jobs {
                let Some(i) = pending.pop() else { break };
                let cell = &cells[i].1;
                std::fs::create_dir_all(cell.out_dir())?;
                let cfg_file = cell.out_dir().join("run.cfg");
                write_flat_config(cell, &cfg_file)?;
                match run_cell_process(&exe, &cfg_file) {
                    Ok(child) => running.push((i, child)),
                    Err(e) => outcome[i] = Some(Err(e)),
                }
            }
            let (i, mut child) = running.remove(0);
            let ok = child.wait()?.success();
            outcome[i] = Some(if ok {
                cell_metrics(&cells[i].1)
            } else {
                Err(anyhow!("cell process failed"))
            });
        }
        status = outcome.into_iter().map(|o| o.expect("every cell ran")).collect();
    }

    let keys: Vec<&str> = grid.iter().map(|(k, _)| k.as_str()).collect();
    let mut rows = vec![format!("{},mae,acc,status,config_sha256", keys.join(","))];
    let mut failures = 0;
    for ((combo, cell), r) in cells.iter().zip(&status) {
        let (mae, acc, st) = match r {
            Ok((m, a)) => (m.to_string(), a.to_string(), "ok".to_string()),
            Err(e) => {
                failures += 1;
                (
                    String::new(),
                    String::new(),
                    format!("\"error: {}\"", format!("{e:#}").replace('"', "'")),
                )
            }
        };
        rows.push(format!("{},{mae},{acc},{st},{}", combo.join(","), cell.hash()));
    }
    write_csv_with_header(
        &out.join("sweep.csv"),
        &json!({ "config": cfg.to_json(), "grid": grid }),
        &rows,
    )?;
    println!(
        "{} cells ({failures} failed); wrote {}",
        cells.len(),
        out.join("sweep.csv").display()
    );
    if failures > 0 {
        bail!("{failures} sweep cell(s) failed");
    }
    Ok(())
}
