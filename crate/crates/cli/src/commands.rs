use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use laf_core::baselines::{
    default_lambda_grid, ewma_cov, ewma_init, moving_average_mean, select_lambda,
};
use laf_core::diagnostics::{
    lag1_autocorrelation, psrf_split, standardized_errors, summarize_chain, ErrorTable,
};
use laf_core::online::{
    extract_fixed_params, one_step_errors, online_update, predict, FixedParams, OneStepErrors,
};
use laf_core::sampler::{chain_rng, run_chains, Chain, Progress};
use laf_core::synth::{continue_generate, generate, ScenarioSpec};
use laf_core::{Dataset, LafConfig, MeanCovPath};

use crate::config::{read_config, write_config};
use crate::io::{
    format_date, ingest_csv, parse_date, read_path, write_dataset, write_path, write_summary,
    write_table,
};
use crate::manifest::RunManifest;
use crate::{Command, ScenarioArg, UsageError};

const HPD_PROB: f64 = 0.95;
const THREADS_VAR: &str = "LAF_THREADS";

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            scenario,
            seed,
            out,
            continue_steps,
        } => simulate(scenario, seed, &out, continue_steps),
        Command::Fit {
            data,
            config,
            chains,
            seed,
            out,
            quiet,
        } => fit(&data, config.as_deref(), chains, seed, &out, quiet),
        Command::Update {
            fitted,
            new_data,
            warmstart,
            seed,
            out,
        } => {
            let out = out.unwrap_or_else(|| fitted.join("update"));
            update(&fitted, &new_data, warmstart, seed, &out)
        }
        Command::Predict {
            fitted,
            horizon,
            realized,
            warmstart,
            seed,
            out,
        } => {
            let out = out.unwrap_or_else(|| fitted.join("predict"));
            forecast(&fitted, horizon, realized.as_deref(), warmstart, seed, &out)
        }
        Command::Diagnose { fitted, segments } => diagnose(&fitted, segments),
        Command::Baseline {
            data,
            truth,
            fitted,
            lambda,
            window,
            out,
        } => baseline(
            &data,
            truth.as_deref(),
            fitted.as_deref(),
            lambda,
            window,
            &out,
        ),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(UsageError(format!("{THREADS_VAR}={v} is not a positive integer")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn simulate(
    scenario: ScenarioArg,
    seed: u64,
    out: &Path,
    continue_steps: Option<usize>,
) -> Result<()> {
    create_dir(out)?;
    let mut spec = match scenario {
        ScenarioArg::A => ScenarioSpec::a(),
        ScenarioArg::B => ScenarioSpec::b(),
    };
    spec.seed = seed;
    let mut rng = chain_rng(seed, 0);
    let (data, truth) = generate(&spec, &mut rng)?;
    let mut m = RunManifest::new("simulate");
    m.seed = Some(seed);
    write_dataset(&out.join("data.csv"), &data)?;
    write_path(out, "truth", &data.times, &truth.gamma)?;
    m.outputs
        .extend(["data.csv", "truth_mu.csv", "truth_sigma.csv"].map(String::from));
    if let Some(extra) = continue_steps {
        let n = data.len();
        let (new, ext) = continue_generate(&truth, extra, &mut rng)?;
        write_dataset(&out.join("data_new.csv"), &new)?;
        write_path(out, "truth_new", &new.times, &ext.gamma.slice(n, n + extra))?;
        m.outputs
            .extend(["data_new.csv", "truth_new_mu.csv", "truth_new_sigma.csv"].map(String::from));
    }
    m.write(out)?;
    println!(
        "simulated scenario {scenario:?}: {} series, {} steps -> {}",
        data.p(),
        data.len(),
        out.display()
    );
    Ok(())
}

fn trace_rows(chain: &Chain) -> (Vec<String>, Vec<Vec<f64>>) {
    let first = &chain.draws[0];
    let (p, n) = (first.p(), first.n_steps());
    let mut header = vec!["log_likelihood".to_string()];
    header.extend((1..=p).map(|j| format!("sigma0_{j}")));
    header.extend((1..=n).map(|i| format!("trace_sigma_{i}")));
    let rows = (0..chain.len())
        .map(|d| {
            let path = chain.composed_path(d);
            let mut row = vec![chain.log_likelihood[d]];
            row.extend(chain.draws[d].sigma2_idio.iter());
            row.extend(path.sigma.iter().map(|s| s.trace()));
            row
        })
        .collect();
    (header, rows)
}

fn write_trace(path: &Path, chain: &Chain) -> Result<()> {
    let (names, rows) = trace_rows(chain);
    let mut header = vec!["draw"];
    header.extend(names.iter().map(String::as_str));
    write_table(
        path,
        &header,
        rows.into_iter().enumerate().map(|(d, r)| {
            std::iter::once(d.to_string())
                .chain(r.iter().map(f64::to_string))
                .collect()
        }),
    )
}

fn fit(
    data_path: &Path,
    config: Option<&Path>,
    n_chains: usize,
    seed: Option<u64>,
    out: &Path,
    quiet: bool,
) -> Result<()> {
    if n_chains == 0 {
        bail!(UsageError("--chains must be at least 1".into()));
    }
    let ing = ingest_csv(data_path, None)?;
    let data = ing.data;
    let mut cfg = match config {
        Some(p) => {
            let mut c = read_config(p)?;
            if !c.keys.contains("p") {
                c.config.p = data.p();
            }
            c.config
        }
        None => LafConfig {
            p: data.p(),
            ..LafConfig::default()
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    laf_core::model::validate_config(&cfg)?;
    let threads = thread_count()?;
    create_dir(out)?;
    let start = Instant::now();
    let every = (cfg.n_iter / 10).max(1);
    let report = |p: Progress| {
        if (p.iteration + 1).is_multiple_of(every) {
            eprintln!(
                "chain {}: iteration {} log-likelihood {:.3}",
                p.chain,
                p.iteration + 1,
                p.log_likelihood
            );
        }
    };
    let progress: Option<&(dyn Fn(Progress) + Sync)> = if quiet { None } else { Some(&report) };
    let chains = run_chains(&cfg, &data, n_chains, threads, progress)?;
    let summary = summarize_chain(&chains)?;
    let fixed = extract_fixed_params(&chains[0])?;

    let mut m = RunManifest::new("fit");
    m.config = Some(cfg.clone());
    m.seed = Some(cfg.seed);
    m.input(data_path);
    if let Some(p) = config {
        m.input(p);
    }
    m.date_origin = ing.date_origin.map(format_date);
    write_dataset(&out.join("data.csv"), &data)?;
    write_config(&out.join("config.txt"), &cfg)?;
    write_summary(out, &data.times, &summary)?;
    fs::write(
        out.join("fixed_params.json"),
        serde_json::to_string_pretty(&fixed)?,
    )?;
    m.outputs.extend(
        [
            "data.csv",
            "config.txt",
            "summary_mu.csv",
            "summary_sigma.csv",
            "fixed_params.json",
        ]
        .map(String::from),
    );
    for (c, chain) in chains.iter().enumerate() {
        let name = format!("trace_chain{c}.csv");
        write_trace(&out.join(&name), chain)?;
        m.output(&name);
    }
    m.write(out)?;
    println!(
        "fitted {} chain(s) x {} retained draws in {:.1}s -> {}",
        chains.len(),
        chains[0].len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

struct Fitted {
    config: LafConfig,
    fixed: FixedParams,
    history: Dataset,
    date_origin: Option<NaiveDate>,
}

fn load_fitted(dir: &Path) -> Result<Fitted> {
    let config = read_config(&dir.join("config.txt"))?.config;
    let fixed_path = dir.join("fixed_params.json");
    let text = fs::read_to_string(&fixed_path)
        .with_context(|| format!("reading {}", fixed_path.display()))?;
    let fixed: FixedParams =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", fixed_path.display()))?;
    let history = ingest_csv(&dir.join("data.csv"), None)?.data;
    let manifest = RunManifest::read(dir)?;
    let date_origin = match manifest.date_origin {
        Some(s) => {
            Some(parse_date(&s).with_context(|| format!("bad date origin '{s}' in manifest"))?)
        }
        None => None,
    };
    Ok(Fitted {
        config,
        fixed,
        history,
        date_origin,
    })
}

/// New observations on the fitted time axis.
fn ingest_after_fit(path: &Path, f: &Fitted) -> Result<Dataset> {
    let ing = ingest_csv(path, f.date_origin)?;
    if ing.date_origin.is_some() != f.date_origin.is_some() {
        bail!(
            "{}: time column type (dates or numbers) differs from the fitted data",
            path.display()
        );
    }
    if ing.data.p() != f.history.p() {
        bail!(
            "{}: {} series, the fit has {}",
            path.display(),
            ing.data.p(),
            f.history.p()
        );
    }
    Ok(ing.data.with_names(f.history.names.clone())?)
}

fn warm_tail(f: &Fitted, warmstart: Option<usize>) -> Result<Dataset> {
    let n = f.history.len();
    let k = warmstart.unwrap_or(f.config.warmstart).min(n);
    Ok(f.history.slice(n - k, n)?)
}

fn update(
    dir: &Path,
    new_path: &Path,
    warmstart: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let f = load_fitted(dir)?;
    let new = ingest_after_fit(new_path, &f)?;
    let tail = warm_tail(&f, warmstart)?;
    let seed = seed.unwrap_or(f.config.seed);
    let chain = online_update(&f.fixed, &tail, &new, &f.config, &mut chain_rng(seed, 0))?;
    let summary = chain.new_steps_summary(HPD_PROB)?;
    create_dir(out)?;
    write_summary(out, &new.times, &summary)?;
    let mut m = RunManifest::new("update");
    m.config = Some(f.config.clone());
    m.seed = Some(seed);
    m.input(dir);
    m.input(new_path);
    m.outputs
        .extend(["summary_mu.csv", "summary_sigma.csv"].map(String::from));
    m.write(out)?;
    println!(
        "updated over {} new steps (warm start {}) -> {}",
        new.len(),
        tail.len(),
        out.display()
    );
    Ok(())
}

fn forecast(
    dir: &Path,
    horizon: usize,
    realized: Option<&Path>,
    warmstart: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    if horizon == 0 {
        bail!(UsageError("--horizon must be at least 1".into()));
    }
    let f = load_fitted(dir)?;
    let realized_data = match realized {
        Some(p) => ingest_after_fit(p, &f)?,
        None => Dataset::missing(f.fixed.p(), Vec::new())?,
    };
    let tail = warm_tail(&f, warmstart)?;
    let seed = seed.unwrap_or(f.config.seed);
    let mut rng = chain_rng(seed, 0);
    let pred = predict(
        &f.fixed,
        &tail,
        &realized_data,
        horizon,
        &f.config,
        &mut rng,
    )?;
    create_dir(out)?;
    write_summary(out, &pred.times, &pred.summary(HPD_PROB)?)?;
    let (lo, hi) = pred.y_intervals(HPD_PROB);
    let rows = pred.times.iter().enumerate().flat_map(|(h, t)| {
        let (lo, hi) = (&lo, &hi);
        (0..lo.nrows()).map(move |j| {
            vec![
                t.to_string(),
                (j + 1).to_string(),
                lo[(j, h)].to_string(),
                hi[(j, h)].to_string(),
            ]
        })
    });
    write_table(&out.join("intervals.csv"), &["t", "j", "lo", "hi"], rows)?;
    let mut m = RunManifest::new("predict");
    m.config = Some(f.config.clone());
    m.seed = Some(seed);
    m.input(dir);
    m.outputs
        .extend(["summary_mu.csv", "summary_sigma.csv", "intervals.csv"].map(String::from));
    if let Some(p) = realized {
        m.input(p);
        let e = one_step_errors(&f.fixed, &tail, &realized_data, &f.config, &mut rng)?;
        write_one_step(&out.join("one_step_errors.csv"), &e)?;
        m.output("one_step_errors.csv");
        let mse = e.mse();
        for (name, v) in OneStepErrors::METHODS.iter().zip(mse) {
            println!("one-step MSE method ({name}): {v:.6}");
        }
    }
    m.write(out)?;
    println!("forecast {horizon} step(s) -> {}", out.display());
    Ok(())
}

fn write_one_step(path: &Path, e: &OneStepErrors) -> Result<()> {
    let mut rows = Vec::new();
    for (i, t) in e.times.iter().enumerate() {
        for (name, m) in e.by_method() {
            for j in 0..m.nrows() {
                if m[(j, i)].is_finite() {
                    rows.push(vec![
                        t.to_string(),
                        (j + 1).to_string(),
                        name.to_string(),
                        m[(j, i)].to_string(),
                    ]);
                }
            }
        }
    }
    write_table(path, &["t", "j", "method", "error"], rows)
}

fn read_trace(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (c, col) in cols.iter_mut().enumerate() {
            let v: f64 = rec
                .get(c + 1)
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("{}: unreadable value", path.display()))?;
            col.push(v);
        }
    }
    Ok((names, cols))
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        if let Some(c) = name
            .strip_prefix("trace_chain")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse().ok())
        {
            files.push((c, path));
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("{}: no trace_chain*.csv files", dir.display());
    }
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn diagnose(dir: &Path, segments: usize) -> Result<()> {
    let thin = read_config(&dir.join("config.txt"))?.config.thin;
    let mut rows = Vec::new();
    for (c, file) in trace_files(dir)?.iter().enumerate() {
        let (names, cols) = read_trace(file)?;
        let mut psrfs = Vec::with_capacity(cols.len());
        let mut rho_sum = 0.0;
        for (name, col) in names.iter().zip(&cols) {
            let r = psrf_split(col, segments)?;
            let rho = lag1_autocorrelation(col);
            rho_sum += rho;
            psrfs.push(r);
            rows.push(vec![
                c.to_string(),
                name.clone(),
                r.to_string(),
                rho.to_string(),
            ]);
        }
        psrfs.sort_by(f64::total_cmp);
        let draws = cols.first().map_or(0, Vec::len);
        println!(
            "chain {c}: {draws} draws (thin {thin}), PSRF median {:.3} max {:.3}, {} of {} above 1.2, mean lag-1 autocorrelation {:.3}",
            psrfs[psrfs.len() / 2],
            psrfs[psrfs.len() - 1],
            psrfs.iter().filter(|&&r| r > 1.2).count(),
            psrfs.len(),
            rho_sum / cols.len() as f64
        );
    }
    write_table(
        &dir.join("psrf.csv"),
        &["chain", "quantity", "psrf", "lag1_autocorrelation"],
        rows,
    )?;
    Ok(())
}

fn error_rows(method: &str, t: &ErrorTable) -> Vec<Vec<String>> {
    t.rows()
        .iter()
        .map(|(block, v)| {
            let mut r = vec![method.to_string(), block.to_string()];
            r.extend(v.iter().map(|x| x.to_string()));
            r
        })
        .collect()
}

fn baseline(
    data_path: &Path,
    truth: Option<&Path>,
    fitted: Option<&Path>,
    lambda: f64,
    window: usize,
    out: &Path,
) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(UsageError(format!("--lambda {lambda} outside [0, 1]")));
    }
    if window == 0 {
        bail!(UsageError("--window must be at least 1".into()));
    }
    if fitted.is_some() && truth.is_none() {
        bail!(UsageError("--fitted needs --truth".into()));
    }
    let data = ingest_csv(data_path, None)?.data;
    let mu = moving_average_mean(&data, window)?;
    let init = ewma_init(&data, &mu)?;
    create_dir(out)?;
    let mut m = RunManifest::new("baseline");
    m.input(data_path);
    let truth_path = match truth {
        Some(dir) => {
            m.input(dir);
            let (times, path) = read_path(
                &dir.join("truth_mu.csv"),
                &dir.join("truth_sigma.csv"),
                "value",
            )?;
            if times != data.times || path.p() != data.p() {
                bail!(
                    "{}: truth does not match the data's times or series",
                    dir.display()
                );
            }
            Some(path)
        }
        None => None,
    };
    let lambda = match &truth_path {
        Some(t) => {
            let sel = select_lambda(&data, &mu, &init, t, &default_lambda_grid())?;
            write_table(
                &out.join("lambda_table.csv"),
                &["lambda", "mse"],
                sel.table
                    .iter()
                    .map(|(l, e)| vec![l.to_string(), e.to_string()]),
            )?;
            m.output("lambda_table.csv");
            sel.lambda
        }
        None => lambda,
    };
    let est = MeanCovPath {
        mu: mu.clone(),
        sigma: ewma_cov(&data, &mu, lambda, &init)?,
    };
    write_path(out, "ewma", &data.times, &est)?;
    m.outputs
        .extend(["ewma_mu.csv", "ewma_sigma.csv"].map(String::from));
    if let Some(t) = &truth_path {
        let mut rows = Vec::new();
        if let Some(dir) = fitted {
            m.input(dir);
            let (times, laf) = read_path(
                &dir.join("summary_mu.csv"),
                &dir.join("summary_sigma.csv"),
                "mean",
            )?;
            if times != data.times {
                bail!(
                    "{}: fitted summaries do not cover the data's times",
                    dir.display()
                );
            }
            rows.extend(error_rows("LAF", &standardized_errors(&laf, t)?));
        }
        rows.extend(error_rows("EWMA", &standardized_errors(&est, t)?));
        let mut header = vec!["method", "block"];
        header.extend(ErrorTable::HEADER);
        println!("EWMA lambda* = {lambda}");
        println!("{}", header.join("\t"));
        for r in &rows {
            let nums: Vec<String> = r[2..]
                .iter()
                .map(|s| format!("{:.4}", s.parse::<f64>().unwrap_or(f64::NAN)))
                .collect();
            println!("{}\t{}\t{}", r[0], r[1], nums.join("\t"));
        }
        write_table(&out.join("error_table.csv"), &header, rows)?;
        m.output("error_table.csv");
    }
    m.write(out)?;
    Ok(())
}
