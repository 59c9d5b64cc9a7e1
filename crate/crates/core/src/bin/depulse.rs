use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depulse::config::{InjectionFile, PulseTemplate, RunConfig};
use depulse::detector::{detect_pulses_traced, Detection};
use depulse::pipeline::{inject_pulse, restore_signal_with_chains, snr_db, snr_db_slices, RestorationReport};
use depulse::sampler::{read_chain_csv, summarize, write_chain_csv, PointEstimate, TailModelKind, SHAPE_MH_NAMES};
use depulse::signal::{read_wav, write_wav};
use depulse::Error;

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "depulse",
    version,
    about = "Detect and remove long pulses from digitized records"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Locate pulse onsets and print one line per detection.
    Detect(DetectArgs),
    /// Detect pulses, sample their posteriors and write the restored signal.
    Restore(RestoreArgs),
    /// Add synthetic pulses to a clean recording.
    Synth(SynthArgs),
    /// Summarize a chain written by `restore --dump-chain`.
    ChainStats(ChainStatsArgs),
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Detector block length.
    #[arg(long = "L")]
    l: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    /// Median window length in blocks.
    #[arg(long)]
    c: Option<usize>,
    /// High-band cutoff in Hz.
    #[arg(long)]
    fco: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    input: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
    /// Write per-block mu, median and normalized excess as CSV.
    #[arg(long)]
    dump_mu: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    model: Option<TailModelKind>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Tail fade length in samples.
    #[arg(long)]
    fade: Option<usize>,
    /// Clean recording; adds SNR columns to the report.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Per-pulse CSV report (default: OUTPUT with a .report.csv suffix).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Chain CSV; with several pulses one file per pulse, numbered.
    #[arg(long)]
    dump_chain: Option<PathBuf>,
    /// Fail when any pulse could not be restored.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SynthArgs {
    input: PathBuf,
    output: PathBuf,
    /// Injection spec (TOML, 1-based positions).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Add this many uniformly spaced reference pulses.
    #[arg(long)]
    uniform: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ground-truth CSV (default: OUTPUT with a .truth.csv suffix).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct ChainStatsArgs {
    chain: PathBuf,
    /// Iterations to discard; defaults to the value recorded in the file.
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long)]
    median: bool,
    /// Write retained iterations as a plotting CSV.
    #[arg(long)]
    plot: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NoPulseEvidence { .. } => 2,
        Error::Numeric(_) | Error::DegenerateSignal(_) | Error::DegenerateFit(_) => 3,
        Error::Sampler { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Command::Detect(a) => cmd_detect(a),
        Command::Restore(a) => cmd_restore(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ChainStats(a) => cmd_chain_stats(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("depulse: {e}");
            if let Error::NoPulseEvidence { .. } = e {
                eprintln!("the detector normalizes by the strongest excess, so it needs at least one pulse-like event");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn create(path: &Path) -> depulse::Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_config(common: &CommonArgs) -> depulse::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(l) = common.l {
        cfg.detector.l = l;
    }
    if let Some(x) = common.xi {
        cfg.detector.xi = x;
    }
    if let Some(c) = common.c {
        cfg.detector.c = c;
    }
    if let Some(f) = common.fco {
        cfg.detector.f_co_hz = f;
    }
    Ok(cfg)
}

fn cmd_detect(a: DetectArgs) -> depulse::Result<u8> {
    let cfg = load_config(&a.common)?;
    let signal = read_wav::<f64>(&a.input)?;
    cfg.detector.validate(signal.sample_rate_hz())?;
    log::info!("effective detector config: {:?}", cfg.detector);
    let (dets, trace) = detect_pulses_traced(&signal, &cfg.detector)?;
    if let Some(path) = &a.dump_mu {
        let mut out = create(path)?;
        let e = io_err(path);
        writeln!(out, "# depulse {VERSION} seed={}", cfg.seed).map_err(&e)?;
        writeln!(out, "block,first_sample,mu,mu_median,delta_mu").map_err(&e)?;
        let hop = cfg.detector.hop();
        for (b, ((m, md), d)) in trace.mu.iter().zip(&trace.mu_median).zip(&trace.delta).enumerate() {
            writeln!(out, "{},{},{m:e},{md:e},{d:e}", b + 1, b * hop + 1).map_err(&e)?;
        }
        out.flush().map_err(&e)?;
    }
    println!("n0\tM\tscore");
    for d in &dets {
        println!("{}\t{}\t{:.4}", d.n0 + 1, d.m, d.score);
    }
    Ok(0)
}

fn resolve_restore(a: &RestoreArgs) -> depulse::Result<RunConfig> {
    let mut cfg = load_config(&a.common)?;
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(v) = a.iters {
        cfg.sampler.iterations = Some(v);
    }
    if let Some(v) = a.burnin {
        cfg.sampler.burn_in = Some(v);
    }
    if let Some(v) = a.thin {
        cfg.sampler.thin = Some(v);
    }
    if let Some(v) = a.fade {
        cfg.fade_len = Some(v);
    }
    if let Some(p) = &a.input {
        cfg.input = Some(p.clone());
    }
    if let Some(p) = &a.output {
        cfg.output = Some(p.clone());
    }
    Ok(cfg)
}

fn cmd_restore(a: RestoreArgs) -> depulse::Result<u8> {
    let cfg = resolve_restore(&a)?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::Config("no input file given".into()))?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| Error::Config("no output file given".into()))?;
    let signal = read_wav::<f64>(&input)?;
    cfg.validate(signal.sample_rate_hz())?;
    log::info!("effective config:\n{}", cfg.effective_toml());
    let reference = a.reference.as_ref().map(read_wav::<f64>).transpose()?;

    let (dets, _) = detect_pulses_traced(&signal, &cfg.detector)?;
    log::info!("{} pulse(s) detected", dets.len());
    let rc = cfg.restore_config();
    let (restored, mut report, chains) = restore_signal_with_chains(&signal, &dets, &rc)?;
    if let Some(r) = &reference {
        report.snr_before_db = Some(snr_db(r, &signal)?);
        report.snr_after_db = Some(snr_db(r, &restored)?);
    }
    write_wav(&output, &restored)?;

    if let Some(path) = &a.dump_chain {
        let many = chains.len() > 1;
        for (i, c) in chains.iter().enumerate() {
            let Some((start, chain)) = c else { continue };
            let p = if many {
                with_suffix(path, &format!(".{}.csv", i + 1))
            } else {
                path.clone()
            };
            let comment = format!(
                "depulse {VERSION} seed={} model={} pulse={} burn_in={} excerpt_start={}",
                cfg.seed,
                cfg.model,
                i + 1,
                rc.sampler.burn_in,
                start + 1
            );
            let mut out = create(&p)?;
            write_chain_csv(chain, &mut out, &comment, start + 1)?;
        }
    }

    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&output, ".report.csv"));
    write_report(
        &report_path,
        &report,
        &cfg,
        reference.as_ref().map(|r| (r, &signal, &restored)),
    )?;
    print_report(&report, &dets);

    let failures = report.failures();
    if failures > 0 && a.strict {
        eprintln!("depulse: {failures} pulse(s) failed and --strict is set");
        return Ok(3);
    }
    Ok(0)
}

type SignalTriple<'a> = (&'a depulse::Signal, &'a depulse::Signal, &'a depulse::Signal);

fn write_report(
    path: &Path,
    report: &RestorationReport,
    cfg: &RunConfig,
    snr: Option<SignalTriple<'_>>,
) -> depulse::Result<()> {
    let mut out = create(path)?;
    let e = io_err(path);
    writeln!(out, "# depulse {VERSION} seed={} model={}", cfg.seed, cfg.model).map_err(&e)?;
    let mut header = vec![
        "pulse",
        "detected_n0",
        "detected_M",
        "status",
        "n0",
        "M",
        "sigma_d2",
        "sigma_d2_lo",
        "sigma_d2_hi",
        "loc_acceptance",
        "tail_acceptance",
        "seconds",
    ];
    if snr.is_some() {
        header.extend(["snr_before_db", "snr_after_db"]);
    }
    writeln!(out, "{}", header.join(",")).map_err(&e)?;
    for p in &report.pulses {
        let mut row = vec![
            (p.index + 1).to_string(),
            (p.detection.n0 + 1).to_string(),
            p.detection.m.to_string(),
        ];
        let span = match &p.result {
            Ok(r) => {
                let s = r.params.iter().find(|s| s.name == "sigma_d2");
                row.extend([
                    "ok".to_string(),
                    (r.n0 + 1).to_string(),
                    r.m.to_string(),
                    s.map_or(String::new(), |s| format!("{:e}", s.point)),
                    s.map_or(String::new(), |s| format!("{:e}", s.lower)),
                    s.map_or(String::new(), |s| format!("{:e}", s.upper)),
                    format!("{:.4}", r.acceptance.location),
                    r.acceptance.tail.map_or(String::new(), |t| format!("{t:.4}")),
                    format!("{:.3}", r.seconds),
                ]);
                Some((r.excerpt_start, cfg.excerpt_len))
            }
            Err(msg) => {
                row.push(format!("failed: {}", msg.replace(',', ";")));
                row.extend(std::iter::repeat_n(String::new(), 8));
                None
            }
        };
        if let Some((clean, deg, rest)) = snr {
            match span {
                Some((start, len)) => {
                    let end = (start + len).min(clean.len());
                    let r = &clean.samples()[start..end];
                    row.push(format!("{:.3}", snr_db_slices(r, &deg.samples()[start..end])?));
                    row.push(format!("{:.3}", snr_db_slices(r, &rest.samples()[start..end])?));
                }
                None => row.extend([String::new(), String::new()]),
            }
        }
        writeln!(out, "{}", row.join(",")).map_err(&e)?;
    }
    out.flush().map_err(&e)
}

fn print_report(report: &RestorationReport, dets: &[Detection]) {
    println!(
        "{} pulse(s) detected, {} restored",
        dets.len(),
        dets.len() - report.failures()
    );
    for p in &report.pulses {
        match &p.result {
            Ok(r) => {
                println!("pulse {}: n0 = {}, M = {}", p.index + 1, r.n0 + 1, r.m);
                for s in &r.params {
                    println!("  {:<9} {:>12.5} [{:.5}; {:.5}]", s.name, s.point, s.lower, s.upper);
                }
                let acc = r.acceptance;
                print!(
                    "  acceptance: location {:.3} ({:.3} after burn-in)",
                    acc.location, acc.location_post_burn_in
                );
                if let (Some(t), Some(tp)) = (acc.tail, acc.tail_post_burn_in) {
                    print!(", tail {t:.3} ({tp:.3} after burn-in)");
                }
                println!(", {:.2} s", r.seconds);
                if let Some(per) = acc.tail_per_param {
                    let parts: Vec<String> = SHAPE_MH_NAMES
                        .iter()
                        .zip(per)
                        .map(|(n, v)| format!("{n} {v:.3}"))
                        .collect();
                    println!("  shape acceptance: {}", parts.join(", "));
                }
            }
            Err(msg) => println!("pulse {}: not restored ({msg})", p.index + 1),
        }
    }
    if let (Some(b), Some(a)) = (report.snr_before_db, report.snr_after_db) {
        println!("SNR: {b:.2} dB before, {a:.2} dB after ({:+.2} dB)", a - b);
    }
}

fn cmd_synth(a: SynthArgs) -> depulse::Result<u8> {
    let clean = read_wav::<f64>(&a.input)?;
    let mut file = match &a.spec {
        Some(p) => InjectionFile::load(p)?,
        None => InjectionFile::default(),
    };
    if let Some(k) = a.uniform {
        file.uniform = Some(k);
        if file.template.is_none() {
            file.template = Some(PulseTemplate::default());
        }
    }
    if let Some(s) = a.seed {
        file.seed = s;
    }
    if a.spec.is_none() && a.uniform.is_none() {
        log::warn!("no --spec or --uniform given; output equals input");
    }
    let spec = file.to_spec(clean.len())?;
    log::info!("injecting {} pulse(s) with seed {}", spec.pulses.len(), spec.seed);
    let degraded = inject_pulse(&clean, &spec)?;
    write_wav(&a.output, &degraded)?;

    let truth = a.truth.clone().unwrap_or_else(|| with_suffix(&a.output, ".truth.csv"));
    let mut out = create(&truth)?;
    let e = io_err(&truth);
    writeln!(out, "# depulse {VERSION} seed={}", spec.seed).map_err(&e)?;
    writeln!(out, "pulse,n0,M,sigma_d2,V_t,tau_m,tau_f,f_max,f_min,phi,tail_len").map_err(&e)?;
    let mut sorted = spec.pulses.clone();
    sorted.sort_by_key(|p| p.n0);
    for (i, p) in sorted.iter().enumerate() {
        let t = &p.tail;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            i + 1,
            p.n0 + 1,
            p.m,
            p.sigma_d2,
            t.v_t,
            t.tau_m,
            t.tau_f,
            t.f_max,
            t.f_min,
            t.phi,
            p.tail_len
        )
        .map_err(&e)?;
    }
    out.flush().map_err(&e)?;
    println!("{} pulse(s) written to {}", sorted.len(), a.output.display());
    Ok(0)
}

/// Reads `burn_in=K` from the leading comment lines.
fn recorded_burn_in(text: &str) -> Option<usize> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .flat_map(str::split_whitespace)
        .find_map(|tok| tok.strip_prefix("burn_in=")?.parse().ok())
}

fn cmd_chain_stats(a: ChainStatsArgs) -> depulse::Result<u8> {
    let text = std::fs::read_to_string(&a.chain).map_err(io_err(&a.chain))?;
    let table = read_chain_csv(BufReader::new(text.as_bytes()))?;
    let rows = table.rows();
    let burn = a.burnin.or_else(|| recorded_burn_in(&text)).unwrap_or(0);
    if a.thin == 0 {
        return Err(Error::Config("thin must be >= 1".into()));
    }
    if burn >= rows {
        return Err(Error::Config(format!("burn-in {burn} leaves none of the {rows} rows")));
    }
    let point = if a.median {
        PointEstimate::Median
    } else {
        PointEstimate::Mean
    };
    let keep: Vec<usize> = (burn..rows).step_by(a.thin).collect();
    let pick = |col: &[f64]| keep.iter().map(|&i| col[i]).collect::<Vec<f64>>();
    let rate = |name: &str| -> Option<f64> {
        let c: Vec<f64> = pick(table.column(name)?).into_iter().filter(|v| !v.is_nan()).collect();
        (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
    };
    let loc = rate("loc_accepted");
    println!(
        "{rows} iterations, {} retained (burn-in {burn}, thin {})",
        keep.len(),
        a.thin
    );
    println!(
        "{:<10} {:>14} {:>32} {:>10}",
        "parameter", "estimate", "95% interval", "accept"
    );
    for (name, col) in table.columns.iter().zip(&table.values) {
        if name == "iteration" || name == "loc_accepted" || name.starts_with("acc_") {
            continue;
        }
        let s = summarize(name, &pick(col), point);
        let acc = match name.as_str() {
            "n0" | "M" => loc,
            other => rate(&format!("acc_{other}")),
        };
        let interval = format!("[{}; {}]", fmt_num(s.lower), fmt_num(s.upper));
        println!(
            "{:<10} {:>14} {:>32} {:>10}",
            name,
            fmt_num(s.point),
            interval,
            acc.map_or("--".to_string(), |r| format!("{r:.4}"))
        );
    }
    if let Some(path) = &a.plot {
        let mut out = create(path)?;
        let e = io_err(path);
        writeln!(out, "# depulse {VERSION} burn_in={burn} thin={}", a.thin).map_err(&e)?;
        writeln!(out, "{}", table.columns.join(",")).map_err(&e)?;
        for &i in &keep {
            let row: Vec<String> = table
                .values
                .iter()
                .map(|c| {
                    if c[i].is_nan() {
                        String::new()
                    } else {
                        format!("{}", c[i])
                    }
                })
                .collect();
            writeln!(out, "{}", row.join(",")).map_err(&e)?;
        }
        out.flush().map_err(&e)?;
    }
    Ok(0)
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v}")
    } else if v.abs() >= 1e-3 && v.abs() < 1e5 {
        format!("{v:.4}")
    } else {
        format!("{v:.4e}")
    }
}
