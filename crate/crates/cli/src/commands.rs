use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use prefval::analysis::{
    export_layer_heatmap, export_noise_sweep, export_scores, export_trace, import_scores, run_lossdiff_irm_pipeline,
    run_noise_sweep, run_partition_dynamics, ScoreRecord,
};
use prefval::config::{ExperimentConfig, StageOpts};
use prefval::data::{gen_synthetic, load_dataset, save_dataset, stratified_split, DatasetSplits};
use prefval::influence::{influence_scores, layerwise_influence, loo_effects, tif_mask, val_gradient, LooSetup, TifBand};
use prefval::policy::{init_model, PolicyModel};
use prefval::proxy::{train_aux_val_model, ProxyScorer};
use prefval::selection::{baseline_select, band_select, lossdiff_irm_select, Method, SelectionBand, SelectionMask};
use prefval::stats::{correlations, spearman};
use prefval::trainer::{align_train, eval_metrics, load_checkpoint, save_checkpoint, sft_pretrain, TrainOpts};
use prefval::PreferencePair;

use crate::manifest::Manifest;
use crate::{Cli, Command, GlobalArgs, SplitArgs, StageArgs};

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen {
            n,
            flip,
            vocab,
            prompt_len,
            response_len,
            score_noise,
            test,
            out,
        } => {
            let mut cfg = g.resolve_config()?;
            let d = &mut cfg.data;
            set(&mut d.vocab, vocab);
            set(&mut d.prompt_len, prompt_len);
            set(&mut d.response_len, response_len);
            set(&mut d.score_noise, score_noise);
            set(&mut d.flip_rate, flip);
            let synth = if test {
                if flip.is_some_and(|f| f != 0.0) {
                    bail!("--test generates clean pairs; --flip must be 0");
                }
                let mut s = cfg.test_synth_config();
                set(&mut s.n_pairs, n);
                s
            } else {
                let mut s = cfg.pool_synth_config();
                set(&mut s.n_pairs, n);
                s
            };
            let pairs = gen_synthetic(&synth)?;
            let out = prepare_file(g, &out)?;
            save_dataset(&pairs, &out)?;
            let mut m = Manifest::new("gen");
            m.config(&cfg)?
                .set("n_pairs", synth.n_pairs as i64)
                .set("test", test)
                .set("generator_seed", format!("{:#018x}", synth.seed))
                .output(&out);
            m.write(&sidecar(&out))?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::Split {
            data,
            val_fraction,
            strat_key,
            buckets,
            out_dir,
        } => {
            let mut cfg = g.resolve_config()?;
            set(&mut cfg.data.strat_key, strat_key);
            set(&mut cfg.data.strat_buckets, buckets);
            let pairs = load_pairs(&data)?;
            let frac = val_fraction
                .unwrap_or(cfg.data.n_val as f64 / (cfg.data.n_train + cfg.data.n_val) as f64);
            let split = stratified_split(&pairs, frac, cfg.data.strat_key, cfg.data.strat_buckets, cfg.seed("data/split"))?;
            let dir = prepare_dir(g, &out_dir)?;
            let mut m = Manifest::new("split");
            m.config(&cfg)?.input(&data)?.set("val_fraction", frac);
            for (name, part) in [("train.jsonl", &split.train), ("val.jsonl", &split.val)] {
                let path = dir.join(name);
                save_dataset(part, &path)?;
                m.output(&path);
            }
            m.write(&dir.join("manifest.toml"))?;
            println!("train {} / val {} -> {}", split.train.len(), split.val.len(), dir.display());
        }
        Command::Sft { train, stage, out } => {
            let mut cfg = g.resolve_config()?;
            apply_stage(&mut cfg.sft, &stage);
            let pairs = load_pairs(&train)?;
            let init = init_model(&cfg.model_config())?;
            let model = sft_pretrain(&init, &pairs, &cfg.stage_opts("sft")?)?;
            let out = prepare_file(g, &out)?;
            save_checkpoint(&model, &out)?;
            let mut m = Manifest::new("sft");
            m.config(&cfg)?.input(&train)?.output(&out);
            m.write(&sidecar(&out))?;
            println!("wrote reference model to {}", out.display());
        }
        Command::Align {
            train,
            reference,
            init,
            stage_name,
            stage,
            out_dir,
        } => {
            let mut cfg = g.resolve_config()?;
            apply_stage(stage_mut(&mut cfg, &stage_name)?, &stage);
            let obj = cfg.objective()?;
            let pairs = load_pairs(&train)?;
            let reference_model = load_model(&reference)?;
            let start = match &init {
                Some(p) => load_model(p)?,
                None => reference_model.clone(),
            };
            let opts = TrainOpts {
                checkpoint_every_epoch: true,
                ..cfg.stage_opts(&stage_name)?
            };
            let (model, store) = align_train(&start, &reference_model, &pairs, &obj, &opts)?;
            let dir = prepare_dir(g, &out_dir)?;
            let mut m = Manifest::new("align");
            m.config(&cfg)?.set("stage", stage_name.as_str()).input(&train)?.input(&reference)?;
            if let Some(p) = &init {
                m.input(p)?;
            }
            for path in store.save_dir(&dir)? {
                m.output(&path);
            }
            let last = dir.join("final.ckpt");
            save_checkpoint(&model, &last)?;
            m.output(&last);
            m.write(&dir.join("manifest.toml"))?;
            println!("{} checkpoints in {}", store.len(), dir.display());
        }
        Command::Score {
            model,
            reference,
            train,
            val,
            aux,
            epoch,
            no_if,
            tif,
            xi,
            tau,
            out,
        } => {
            let mut cfg = g.resolve_config()?;
            set(&mut cfg.selection.tif, tif);
            set(&mut cfg.selection.xi, xi);
            set(&mut cfg.selection.tau, tau);
            cfg.selection.score_if = !no_if;
            let obj = cfg.objective()?;
            let policy = load_model(&model)?;
            let reference_model = load_model(&reference)?;
            let train_pairs = load_pairs(&train)?;
            let val_pairs = load_pairs(&val)?;
            let out = prepare_file(g, &out)?;
            let mut m = Manifest::new("score");
            m.config(&cfg)?.set("epoch", epoch as i64);
            for p in [&model, &reference, &train, &val] {
                m.input(p)?;
            }
            let aux_model = match &aux {
                Some(p) => {
                    m.input(p)?;
                    load_model(p)?
                }
                None => {
                    let trained =
                        train_aux_val_model(&policy, &reference_model, &val_pairs, &obj, &cfg.stage_opts("aux")?)?;
                    let path = with_suffix(&out, ".aux.ckpt");
                    save_checkpoint(&trained, &path)?;
                    m.output(&path);
                    trained
                }
            };
            let scores = ProxyScorer::new(&obj, &policy, &aux_model, &reference_model)?.score_all(&train_pairs)?;
            let lds: Vec<f64> = scores.iter().map(|s| s.lossdiff).collect();
            let irms: Vec<f64> = scores.iter().map(|s| s.irm).collect();
            let ifs = if no_if {
                None
            } else {
                Some(influence_scores(&obj, &policy, &reference_model, &val_pairs, &train_pairs)?)
            };
            let tif_flags = match &ifs {
                Some(s) => Some(tif_mask(s, &TifBand::new(cfg.selection.tif.lo, cfg.selection.tif.hi)?)?),
                None => None,
            };
            let ids = pair_ids(&train_pairs);
            let combined = lossdiff_irm_select(&ids, &lds, &irms, &cfg.selection.xi, &cfg.selection.tau)?;
            let records: Vec<ScoreRecord> = (0..ids.len())
                .map(|i| ScoreRecord {
                    pair_id: ids[i].clone(),
                    epoch,
                    if_score: ifs.as_ref().map(|s| s[i]),
                    lossdiff: Some(lds[i]),
                    irm: Some(irms[i]),
                    tif_selected: tif_flags.as_ref().map(|t| t[i]),
                    combined_selected: Some(combined.selected[i]),
                })
                .collect();
            export_scores(&records, &out)?;
            m.output(&out);
            m.write(&sidecar(&out))?;
            println!("scored {} pairs -> {}", records.len(), out.display());
        }
        Command::Select {
            method,
            scores,
            data,
            xi,
            tau,
            band,
            fraction,
            out,
        } => {
            let mut cfg = g.resolve_config()?;
            set(&mut cfg.selection.xi, xi);
            set(&mut cfg.selection.tau, tau);
            let mut m = Manifest::new("select");
            m.config(&cfg)?.set("method", method.as_str());
            let mask = match method {
                Method::Tif | Method::LossDiffIrm | Method::LossDiffOnly | Method::IrmOnly => {
                    let path = scores.as_ref().ok_or_else(|| anyhow!("--scores is required for `{method}`"))?;
                    m.input(path)?;
                    let records = import_scores(path)?;
                    let ids: Vec<String> = records.iter().map(|r| r.pair_id.clone()).collect();
                    let band_or = |default: SelectionBand| band.unwrap_or(default);
                    match method {
                        Method::Tif => {
                            let b = band_or(cfg.selection.tif);
                            m.set("band", format!("{},{}", b.lo, b.hi));
                            band_select(&ids, &column(&records, "if")?, &b, method)?
                        }
                        Method::LossDiffIrm => {
                            let (x, t) = (cfg.selection.xi, cfg.selection.tau);
                            lossdiff_irm_select(&ids, &column(&records, "lossdiff")?, &column(&records, "irm")?, &x, &t)?
                        }
                        _ => {
                            let b = band_or(SelectionBand::default());
                            m.set("band", format!("{},{}", b.lo, b.hi));
                            let col = if method == Method::LossDiffOnly { "lossdiff" } else { "irm" };
                            band_select(&ids, &column(&records, col)?, &b, method)?
                        }
                    }
                }
                _ => {
                    let path = data.as_ref().ok_or_else(|| anyhow!("--data is required for `{method}`"))?;
                    m.input(path)?.set("fraction", fraction);
                    baseline_select(method, &load_pairs(path)?, fraction, cfg.experiment.seed)?
                }
            };
            let out = prepare_file(g, &out)?;
            mask.write_csv(&out)?;
            m.set("selected", mask.count() as i64).output(&out);
            m.write(&sidecar(&out))?;
            println!("{}: selected {} of {} ({:.1}%)", method, mask.count(), mask.len(), 100.0 * mask.fraction());
        }
        Command::Retrain {
            train,
            mask,
            dropped,
            reference,
            init,
            stage,
            out,
        } => {
            let mut cfg = g.resolve_config()?;
            apply_stage(&mut cfg.retrain.opts, &stage);
            let obj = cfg.objective()?;
            let mut pairs = load_pairs(&train)?;
            let mut m = Manifest::new("retrain");
            m.config(&cfg)?.input(&train)?.input(&reference)?.set("dropped", dropped);
            if let Some(path) = &mask {
                m.input(path)?;
                pairs = apply_mask(&pairs, &SelectionMask::read_csv(path)?, !dropped)?;
            } else if dropped {
                bail!("--dropped needs --mask");
            }
            let reference_model = load_model(&reference)?;
            let start = match &init {
                Some(p) => {
                    m.input(p)?;
                    load_model(p)?
                }
                None => reference_model.clone(),
            };
            let (model, _) = align_train(&start, &reference_model, &pairs, &obj, &cfg.stage_opts("retrain")?)?;
            let out = prepare_file(g, &out)?;
            save_checkpoint(&model, &out)?;
            m.set("train_pairs", pairs.len() as i64).output(&out);
            m.write(&sidecar(&out))?;
            println!("retrained on {} pairs -> {}", pairs.len(), out.display());
        }
        Command::Eval {
            model,
            reference,
            data,
            out,
        } => {
            let cfg = g.resolve_config()?;
            let metrics = eval_metrics(&load_model(&model)?, &load_model(&reference)?, &load_pairs(&data)?, &cfg.objective()?)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            println!("{text}");
            if let Some(out) = out {
                let out = prepare_file(g, &out)?;
                std::fs::write(&out, format!("{text}\n"))?;
                let mut m = Manifest::new("eval");
                m.config(&cfg)?.input(&model)?.input(&reference)?.input(&data)?.output(&out);
                m.write(&sidecar(&out))?;
            }
        }
        Command::Dynamics {
            splits,
            checkpoints,
            out_dir,
        } => {
            let mut cfg = g.resolve_config()?;
            set(&mut cfg.dynamics.checkpoints, checkpoints);
            let mut m = Manifest::new("dynamics");
            let data = resolve_splits(&cfg, &splits, &mut m)?;
            let results = run_partition_dynamics(&data, &cfg.objective()?, &cfg)?;
            let dir = prepare_dir(g, &out_dir)?;
            let traces: Vec<_> = results.iter().flat_map(|r| r.traces.values().cloned()).collect();
            let trace_path = dir.join("traces.csv");
            export_trace(&traces, &trace_path)?;
            let part_path = dir.join("partition.csv");
            let mut w = csv::Writer::from_path(&part_path)?;
            w.write_record(["checkpoint", "pair_id", "if", "subset"])?;
            for r in &results {
                for (subset, idx) in &r.partition {
                    for &i in idx {
                        w.write_record([
                            r.checkpoint.to_string(),
                            data.train[i].id.clone(),
                            format!("{:.16e}", r.if_scores[i]),
                            subset.as_str().to_string(),
                        ])?;
                    }
                }
            }
            w.flush()?;
            m.config(&cfg)?.output(&trace_path).output(&part_path);
            m.write(&dir.join("manifest.toml"))?;
            println!("{} traces -> {}", traces.len(), dir.display());
        }
        Command::Pipeline {
            splits,
            xi,
            tau,
            no_if,
            out_dir,
        } => {
            let mut cfg = g.resolve_config()?;
            set(&mut cfg.selection.xi, xi);
            set(&mut cfg.selection.tau, tau);
            if no_if {
                cfg.selection.score_if = false;
            }
            let mut m = Manifest::new("pipeline");
            let data = resolve_splits(&cfg, &splits, &mut m)?;
            let out = run_lossdiff_irm_pipeline(&data, &cfg.objective()?, &cfg)?;
            let dir = prepare_dir(g, &out_dir)?;
            let scores = dir.join("scores.csv");
            export_scores(&out.records, &scores)?;
            let mask = dir.join("mask.csv");
            out.mask.write_csv(&mask)?;
            let metrics = dir.join("metrics.json");
            std::fs::write(&metrics, format!("{}\n", serde_json::to_string_pretty(&out.metrics)?))?;
            let model = dir.join("model.ckpt");
            save_checkpoint(&out.model, &model)?;
            let reference = dir.join("reference.ckpt");
            save_checkpoint(&out.scored.reference, &reference)?;
            m.config(&cfg)?;
            for p in [&scores, &mask, &metrics, &model, &reference] {
                m.output(p);
            }
            if splits.train.is_none() {
                for (name, part) in [("train.jsonl", &data.train), ("val.jsonl", &data.val), ("test.jsonl", &data.test)] {
                    let path = dir.join(name);
                    save_dataset(part, &path)?;
                    m.output(&path);
                }
            }
            m.set("selected", out.mask.count() as i64);
            m.write(&dir.join("manifest.toml"))?;
            println!(
                "selected {} of {}; test rank accuracy {:.4}, loss {:.4}, margin {:.4} -> {}",
                out.mask.count(),
                out.mask.len(),
                out.metrics.rank_accuracy,
                out.metrics.eval_loss,
                out.metrics.mean_margin,
                dir.display()
            );
        }
        Command::NoiseSweep { splits, rates, out_dir } => {
            let cfg = g.resolve_config()?;
            let mut m = Manifest::new("noise-sweep");
            let data = resolve_splits(&cfg, &splits, &mut m)?;
            let entries = run_noise_sweep(&data, &cfg.objective()?, &cfg, &rates)?;
            let dir = prepare_dir(g, &out_dir)?;
            let path = dir.join("sweep.csv");
            export_noise_sweep(&entries, &path)?;
            m.config(&cfg)?
                .set("rates", toml::Value::Array(rates.iter().map(|&r| r.into()).collect()))
                .output(&path);
            m.write(&dir.join("manifest.toml"))?;
            for e in &entries {
                println!("rate {:.2}: rank accuracy {:.4}, loss {:.4}, selected {}", e.rate, e.metrics.rank_accuracy, e.metrics.eval_loss, e.selected);
            }
        }
        Command::Heatmap {
            model,
            reference,
            train,
            val,
            out,
        } => {
            let cfg = g.resolve_config()?;
            let obj = cfg.objective()?;
            let policy = load_model(&model)?;
            let reference_model = load_model(&reference)?;
            let train_pairs = load_pairs(&train)?;
            let v = val_gradient(&obj, &policy, &reference_model, &load_pairs(&val)?)?;
            let names: Vec<String> = policy.layers().iter().map(|l| l.name.clone()).collect();
            let rows = train_pairs
                .iter()
                .map(|p| Ok(layerwise_influence(&v, &policy, &reference_model, p)?.into_iter().map(|(_, x)| x).collect()))
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let out = prepare_file(g, &out)?;
            export_layer_heatmap(&pair_ids(&train_pairs), &names, &rows, &out)?;
            let mut m = Manifest::new("heatmap");
            m.config(&cfg)?;
            for p in [&model, &reference, &train, &val] {
                m.input(p)?;
            }
            m.output(&out);
            m.write(&sidecar(&out))?;
            println!("{} pairs x {} layers -> {}", rows.len(), names.len(), out.display());
        }
        Command::Loo {
            train,
            val,
            reference,
            epochs,
            learning_rate,
            batch_size,
            if_epoch,
            cap,
            out,
        } => {
            let cfg = g.resolve_config()?;
            let obj = cfg.objective()?;
            let train_pairs = load_pairs(&train)?;
            let val_pairs = load_pairs(&val)?;
            let reference_model = load_model(&reference)?;
            if if_epoch == 0 || if_epoch > epochs {
                bail!("--if-epoch must be in 1..={epochs}");
            }
            let opts = TrainOpts::sgd(
                epochs,
                batch_size.unwrap_or(train_pairs.len()),
                learning_rate,
                cfg.seed("shuffle/loo"),
            );
            let mut setup = LooSetup::new(reference_model.clone(), reference_model.clone(), opts.clone());
            setup.cap = cap;
            let report = loo_effects(&train_pairs, &val_pairs, &obj, &setup)?;
            let (_, store) = align_train(
                &reference_model,
                &reference_model,
                &train_pairs,
                &obj,
                &TrainOpts { checkpoint_every_epoch: true, ..opts },
            )?;
            let checkpoint = store.get(if_epoch).ok_or_else(|| anyhow!("no checkpoint for epoch {if_epoch}"))?;
            let ifs = influence_scores(&obj, checkpoint, &reference_model, &val_pairs, &train_pairs)?;
            let oriented = report.oriented();
            let out = prepare_file(g, &out)?;
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["pair_id", "if", "loo_effect", "loo_oriented"])?;
            for (i, p) in train_pairs.iter().enumerate() {
                w.write_record([
                    p.id.clone(),
                    format!("{:.16e}", ifs[i]),
                    format!("{:.16e}", report.effects[i]),
                    format!("{:.16e}", oriented[i]),
                ])?;
            }
            w.flush()?;
            let rho = spearman(&ifs, &oriented)?;
            let agree = ifs.iter().zip(&oriented).filter(|(a, b)| a.signum() == b.signum()).count();
            let mut m = Manifest::new("loo");
            m.config(&cfg)?
                .set("epochs", epochs as i64)
                .set("learning_rate", learning_rate)
                .set("if_epoch", if_epoch as i64)
                .set("sign_vs_influence", report.sign_vs_influence);
            for p in [&train, &val, &reference] {
                m.input(p)?;
            }
            m.output(&out);
            m.write(&sidecar(&out))?;
            println!(
                "spearman(IF, LOO) = {rho:.4}; sign agreement {agree}/{} -> {}",
                ifs.len(),
                out.display()
            );
        }
        Command::Corr { scores, x, y } => {
            let records = import_scores(&scores)?;
            let c = correlations(&column(&records, &x)?, &column(&records, &y)?)?;
            println!("{}", serde_json::to_string(&c)?);
        }
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_stage(opts: &mut StageOpts, args: &StageArgs) {
    set(&mut opts.epochs, args.epochs);
    set(&mut opts.batch_size, args.batch_size);
    set(&mut opts.learning_rate, args.learning_rate);
    set(&mut opts.optimizer, args.optimizer);
}

fn stage_mut<'a>(cfg: &'a mut ExperimentConfig, name: &str) -> Result<&'a mut StageOpts> {
    Ok(match name {
        "sft" => &mut cfg.sft,
        "warmup" => &mut cfg.warmup,
        "aux" => &mut cfg.aux,
        "retrain" => &mut cfg.retrain.opts,
        "dynamics" => &mut cfg.dynamics.opts,
        other => bail!("unknown stage `{other}` (expected sft, warmup, aux, retrain, or dynamics)"),
    })
}

fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<PolicyModel> {
    load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn pair_ids(pairs: &[PreferencePair]) -> Vec<String> {
    pairs.iter().map(|p| p.id.clone()).collect()
}

fn column(records: &[ScoreRecord], name: &str) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| {
            let v = match name {
                "if" => r.if_score,
                "lossdiff" => r.lossdiff,
                "irm" => r.irm,
                other => bail!("unknown score column `{other}` (expected if, lossdiff, or irm)"),
            };
            v.ok_or_else(|| anyhow!("pair `{}` has no `{name}` score", r.pair_id))
        })
        .collect()
}

fn apply_mask(pairs: &[PreferencePair], mask: &SelectionMask, keep: bool) -> Result<Vec<PreferencePair>> {
    let flags: HashMap<&str, bool> = mask.pair_ids.iter().map(String::as_str).zip(mask.selected.iter().copied()).collect();
    let mut out = Vec::new();
    for p in pairs {
        match flags.get(p.id.as_str()) {
            Some(&s) if s == keep => out.push(p.clone()),
            Some(_) => {}
            None => bail!("pair `{}` is missing from the mask", p.id),
        }
    }
    if out.is_empty() {
        bail!("the mask leaves no training pairs");
    }
    Ok(out)
}

/// Loads all three splits from files, or builds them from the config.
fn resolve_splits(cfg: &ExperimentConfig, args: &SplitArgs, m: &mut Manifest) -> Result<DatasetSplits> {
    match (&args.train, &args.val, &args.test) {
        (Some(tr), Some(va), Some(te)) => {
            for p in [tr, va, te] {
                m.input(p)?;
            }
            let splits = DatasetSplits {
                train: load_pairs(tr)?,
                val: load_pairs(va)?,
                test: load_pairs(te)?,
            };
            splits.validate()?;
            Ok(splits)
        }
        (None, None, None) => Ok(cfg.build_splits()?),
        _ => bail!("--train, --val, and --test must be given together"),
    }
}

fn prepare_file(g: &GlobalArgs, path: &Path) -> Result<PathBuf> {
    let path = g.out(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn prepare_dir(g: &GlobalArgs, path: &Path) -> Result<PathBuf> {
    let path = g.out(path);
    std::fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn sidecar(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest.toml")
}
