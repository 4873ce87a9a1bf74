//! Command-line surface: generate synthetic streams, run streaming
//! estimators over CSV/JSONL input, simulate the federated variance
//! protocol, and verify streaming results against batch oracles.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::rc::Rc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use rct_stream::bootstrap::BootstrapSummary;
use rct_stream::datagen::DgpSpec;
use rct_stream::error::{Error, Result};
use rct_stream::federated::{partition_by_cluster, run_delta_simulation, run_simulation, Transport};
use rct_stream::ingest::{Format, RecordReader};
use rct_stream::mean::EffectEstimate;
use rct_stream::oracle::{
    batch_cluster_sandwich, batch_ols, diff_in_means, RetainedDataset,
};
use rct_stream::pipeline::{
    normal_critical, run_bootstrap_pate, run_bootstrap_rls, run_outcome_mean, run_pate, run_rls,
    AnalysisOutput, VarianceMethod,
};
use rct_stream::record::{DfDivisor, Record, StreamConfig};
use rct_stream::report::{Report, Warning, WARN_PARTIAL_QUORUM};
use rct_stream::rng::{WeightGenerator, WeightMode};

#[derive(Parser)]
#[command(name = "rct-stream", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Jsonl => Format::Jsonl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DfArg {
    /// n - k
    Nk,
    /// n - k - 1
    Nk1,
}

#[derive(Args)]
struct InputArgs {
    /// Input path, or '-' for stdin.
    input: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Name of the cluster id column (CSV only).
    #[arg(long, default_value = "cluster")]
    cluster: String,
    /// Treat malformed rows as fatal instead of skipping them.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct EstimatorArgs {
    /// Treatment assignment probability.
    #[arg(long, default_value_t = 0.5)]
    pi1: f64,
    /// Records buffered for batch initialization of the regression.
    #[arg(long = "init-m", default_value_t = 0)]
    init_m: usize,
    /// Confidence level for intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Residual-variance divisor.
    #[arg(long, value_enum, default_value = "nk")]
    df: DfArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic experiment stream with known ground truth.
    Gen {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.5)]
        pi1: f64,
        #[arg(long = "noise-sd", default_value_t = 1.0)]
        noise_sd: f64,
        /// Error SD multiplier under treatment.
        #[arg(long, default_value_t = 1.0)]
        hetero: f64,
        /// Number of clusters; omitted means i.i.d. records.
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        icc: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Allocate exactly round(n * pi1) treated units.
        #[arg(long = "exact-count")]
        exact_count: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: FormatArg,
    },
    /// Recursive mean of the outcome column.
    Mean {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Inverse-probability-weighted effect estimate.
    Pate {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Retain the stream and embed oracle comparison deltas.
        #[arg(long)]
        verify: bool,
    },
    /// Recursive least squares with a variance estimate.
    Rls {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        /// Variance estimator.
        #[arg(long, value_enum, default_value = "iid")]
        method: RlsMethodArg,
        #[arg(long)]
        verify: bool,
    },
    /// Online bootstrap with i.i.d. Poisson(1) weights.
    Bootstrap {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long = "B", default_value_t = 200)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bootstrap the transformed mean or the regression coefficient.
        #[arg(long, value_enum, default_value = "pate")]
        estimator: BootstrapTargetArg,
    },
    /// Online cluster bootstrap with cluster-seeded weights.
    ClusterBootstrap {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long = "B", default_value_t = 200)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulated federated computation of cluster-robust variance.
    FederatedSim {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
        #[arg(long, value_enum, default_value = "crse")]
        mode: FederatedModeArg,
        #[arg(long, value_enum, default_value = "in-process")]
        transport: TransportArg,
        /// Minimum fraction of contributing clients required.
        #[arg(long, default_value_t = 1.0)]
        quorum: f64,
    },
    /// Run streaming estimators and compare against batch oracles.
    Verify {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        est: EstimatorArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RlsMethodArg {
    Iid,
    Hrse,
}

#[derive(Clone, Copy, ValueEnum)]
enum BootstrapTargetArg {
    Pate,
    Rls,
}

#[derive(Clone, Copy, ValueEnum)]
enum FederatedModeArg {
    Crse,
    Delta,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Wire,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn open_input(path: &str) -> Result<Box<dyn BufRead>> {
    if path == "-" {
        Ok(Box::new(BufReader::new(std::io::stdin())))
    } else {
        Ok(Box::new(BufReader::new(File::open(path)?)))
    }
}

/// Adapts the fallible reader into a plain record stream. Malformed rows are
/// skipped with a diagnostic unless strict mode is on, in which case the
/// first error is stashed and iteration stops.
fn record_stream<'a>(
    mut reader: RecordReader<Box<dyn BufRead>>,
    strict: bool,
    stash: Rc<RefCell<Option<Error>>>,
) -> impl Iterator<Item = Record> + 'a {
    std::iter::from_fn(move || loop {
        match reader.next()? {
            Ok(r) => return Some(r),
            Err(e) if strict => {
                *stash.borrow_mut() = Some(e);
                return None;
            }
            Err(e) => eprintln!("warning: skipping row: {e}"),
        }
    })
}

fn collect_records(input: &InputArgs) -> Result<Vec<Record>> {
    let reader = RecordReader::new(open_input(&input.input)?, input.format.into(), &input.cluster)?;
    let mut out = Vec::new();
    for item in reader {
        match item {
            Ok(r) => out.push(r),
            Err(e) if input.strict => return Err(e),
            Err(e) => eprintln!("warning: skipping row: {e}"),
        }
    }
    Ok(out)
}

fn emit(report: &Report) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, report)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

fn stream_config(est: &EstimatorArgs, k: usize) -> Result<StreamConfig> {
    let df = match est.df {
        DfArg::Nk => DfDivisor::NMinusK,
        DfArg::Nk1 => DfDivisor::NMinusKMinus1,
    };
    Ok(StreamConfig::new(k, est.pi1, est.init_m)?.with_df_divisor(df))
}

/// Runs a streaming driver over the input without retaining records.
fn with_stream<T>(
    input: &InputArgs,
    f: impl FnOnce(&mut dyn Iterator<Item = Record>) -> Result<T>,
) -> Result<T> {
    let reader = RecordReader::new(open_input(&input.input)?, input.format.into(), &input.cluster)?;
    let stash: Rc<RefCell<Option<Error>>> = Rc::new(RefCell::new(None));
    let mut iter = record_stream(reader, input.strict, stash.clone());
    let result = f(&mut iter);
    drop(iter);
    if let Some(e) = stash.borrow_mut().take() {
        return Err(e);
    }
    result
}

/// Peeks the first record to learn k, then runs the driver over the
/// reconstituted stream.
fn with_peeked_stream<T>(
    input: &InputArgs,
    f: impl FnOnce(usize, &mut dyn Iterator<Item = Record>) -> Result<T>,
) -> Result<T> {
    with_stream(input, |iter| {
        let first = iter
            .next()
            .ok_or(Error::EmptyState("empty input stream"))?;
        let k = first.k();
        let mut chained = std::iter::once(first).chain(iter);
        f(k, &mut chained)
    })
}

fn fill_report(report: &mut Report, est: &EffectEstimate, warnings: &[Warning]) {
    report.tau_hat = Some(est.tau_hat);
    report.se = est.se;
    if let (Some(lo), Some(hi)) = (est.ci_low, est.ci_high) {
        report.ci = Some([lo, hi]);
    }
    report.warnings = warnings.to_vec();
}

fn report_from_output(method: &str, out: &AnalysisOutput) -> Report {
    let mut report = Report::new(method, out.estimate.n);
    fill_report(&mut report, &out.estimate, &out.warnings);
    if let Some(v) = &out.variance {
        report.dof = Some(v.dof);
    }
    if let Some(BootstrapSummary { b_effective, .. }) = out.summary {
        report.b_effective = Some(b_effective);
    }
    report
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            n,
            k,
            tau,
            pi1,
            noise_sd,
            hetero,
            clusters,
            icc,
            seed,
            exact_count,
            format,
        } => {
            let mut spec = DgpSpec::new(n, k, tau, pi1, noise_sd, seed).with_hetero(hetero);
            if let Some(j) = clusters {
                spec = spec.with_clusters(j, icc);
            }
            if exact_count {
                spec = spec.with_exact_count();
            }
            let records = spec.generate()?;
            write_records(&records, format.into(), clusters.is_some())?;
        }
        Cmd::Mean { input } => {
            let mean = with_stream(&input, |iter| run_outcome_mean(iter))?;
            let mut report = Report::new("mean", mean.weight_sum.round() as u64);
            report.tau_hat = Some(mean.mean);
            emit(&report)?;
        }
        Cmd::Pate { input, est, verify } => {
            if verify {
                let records = collect_records(&input)?;
                let k = records.first().map(Record::k).unwrap_or(2);
                let cfg = stream_config(&est, k)?;
                let out = run_pate(records.iter(), &cfg)?;
                let mut report = report_from_output("pate-ht", &out);
                report.verify = Some(verify_pate(&records, &out.estimate)?);
                emit(&report)?;
            } else {
                let out = with_peeked_stream(&input, |k, iter| {
                    run_pate(iter, &stream_config(&est, k)?)
                })?;
                emit(&report_from_output("pate-ht", &out))?;
            }
        }
        Cmd::Rls {
            input,
            est,
            method,
            verify,
        } => {
            let vmethod = match method {
                RlsMethodArg::Iid => VarianceMethod::Iid,
                RlsMethodArg::Hrse => VarianceMethod::Hrse,
            };
            if verify {
                let records = collect_records(&input)?;
                let k = records.first().map(Record::k).unwrap_or(2);
                let cfg = stream_config(&est, k)?;
                let out = run_rls(records.iter(), &cfg, vmethod, est.level)?;
                let mut report = report_from_output(&out.estimate.method.clone(), &out);
                let (value, ok) = verify_rls(&records, &cfg)?;
                report.verify = Some(value);
                emit(&report)?;
                if !ok {
                    return Err(Error::Protocol(
                        "verification deltas exceed tolerance".to_string(),
                    ));
                }
            } else {
                let out = with_peeked_stream(&input, |k, iter| {
                    run_rls(iter, &stream_config(&est, k)?, vmethod, est.level)
                })?;
                emit(&report_from_output(&out.estimate.method.clone(), &out))?;
            }
        }
        Cmd::Bootstrap {
            input,
            est,
            b,
            seed,
            estimator,
        } => {
            let gen = WeightGenerator::new(seed, WeightMode::Iid);
            let out = with_peeked_stream(&input, |k, iter| {
                let cfg = stream_config(&est, k)?;
                match estimator {
                    BootstrapTargetArg::Pate => {
                        run_bootstrap_pate(iter, &cfg, &gen, b, est.level)
                    }
                    BootstrapTargetArg::Rls => run_bootstrap_rls(iter, &cfg, &gen, b, est.level),
                }
            })?;
            emit(&report_from_output(&out.estimate.method.clone(), &out))?;
        }
        Cmd::ClusterBootstrap {
            input,
            est,
            b,
            seed,
        } => {
            let gen = WeightGenerator::new(seed, WeightMode::ClusterSeeded);
            let out = with_peeked_stream(&input, |k, iter| {
                run_bootstrap_pate(iter, &stream_config(&est, k)?, &gen, b, est.level)
            })?;
            emit(&report_from_output(&out.estimate.method.clone(), &out))?;
        }
        Cmd::FederatedSim {
            input,
            est,
            mode,
            transport,
            quorum,
        } => {
            let records = collect_records(&input)?;
            if records.is_empty() {
                return Err(Error::EmptyState("empty input stream"));
            }
            let transport = match transport {
                TransportArg::InProcess => Transport::InProcess,
                TransportArg::Wire => Transport::Wire,
            };
            let report = match mode {
                FederatedModeArg::Crse => federated_crse(&records, &est, transport, quorum)?,
                FederatedModeArg::Delta => federated_delta(&records, &est, transport)?,
            };
            emit(&report)?;
        }
        Cmd::Verify { input, est } => {
            let records = collect_records(&input)?;
            if records.is_empty() {
                return Err(Error::EmptyState("empty input stream"));
            }
            let cfg = stream_config(&est, records[0].k())?;
            let (value, ok) = verify_rls(&records, &cfg)?;
            let mut report = Report::new("verify", records.len() as u64);
            report.verify = Some(value);
            emit(&report)?;
            if !ok {
                return Err(Error::Protocol(
                    "verification deltas exceed tolerance".to_string(),
                ));
            }
        }
    }
    Ok(())
}

fn write_records(records: &[Record], format: Format, with_cluster: bool) -> Result<()> {
    let stdout = std::io::stdout().lock();
    let mut w = std::io::BufWriter::new(stdout);
    match format {
        Format::Csv => {
            let k = records[0].k();
            let mut header = vec!["y".to_string(), "d".to_string()];
            for i in 2..k {
                header.push(format!("x{}", i));
            }
            if with_cluster {
                header.push("cluster".to_string());
            }
            writeln!(w, "{}", header.join(","))?;
            for r in records {
                let mut fields = vec![fmt_f64(r.y), fmt_f64(r.d())];
                for v in &r.x[2..] {
                    fields.push(fmt_f64(*v));
                }
                if with_cluster {
                    fields.push(
                        r.cluster_id
                            .as_ref()
                            .map(|c| String::from_utf8_lossy(c).into_owned())
                            .unwrap_or_default(),
                    );
                }
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        Format::Jsonl => {
            for r in records {
                let row = serde_json::json!({
                    "y": r.y,
                    "d": r.d() as u8,
                    "x": &r.x[2..],
                    "cluster": r.cluster_id.as_ref().map(|c| String::from_utf8_lossy(c)),
                });
                serde_json::to_writer(&mut w, &row)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // serde_json uses ryu internally; going through Value keeps the output
    // consistent with the JSONL path
    serde_json::to_string(&v).expect("finite float")
}

fn federated_crse(
    records: &[Record],
    est: &EstimatorArgs,
    transport: Transport,
    quorum: f64,
) -> Result<Report> {
    let cfg = stream_config(est, records[0].k())?;
    let (state, _, arms, _) =
        rct_stream::pipeline::run_rls_state(records.iter(), &cfg, VarianceMethod::Iid)?;
    let clients = partition_by_cluster(records.to_vec());
    let beta: Vec<f64> = state.beta.iter().copied().collect();
    let (variance, stats) =
        run_simulation(&clients, &beta, state.z_inv.clone(), transport, quorum)?;
    let tau_hat = state.beta[1];
    let se = variance.se(1);
    let z = normal_critical(est.level);
    let mut report = Report::new("federated-crse", arms.n());
    report.tau_hat = Some(tau_hat);
    report.se = Some(se);
    report.ci = Some([tau_hat - z * se, tau_hat + z * se]);
    report.dof = Some(variance.dof);
    let expected = clients.iter().filter(|c| !c.records.is_empty()).count();
    if stats.contributions < expected {
        report.warnings.push(Warning::new(
            WARN_PARTIAL_QUORUM,
            format!(
                "aggregated {} of {} client contributions; the estimand \
                 reflects the contributing subset",
                stats.contributions, expected
            ),
        ));
    }
    Ok(report)
}

fn federated_delta(
    records: &[Record],
    est: &EstimatorArgs,
    transport: Transport,
) -> Result<Report> {
    let clients = partition_by_cluster(records.to_vec());
    let (effect, _stats) = run_delta_simulation(&clients, &[], transport)?;
    let tau_hat = effect.tau_hat()?;
    let se = effect.variance()?.sqrt();
    let z = normal_critical(est.level);
    let mut report = Report::new("federated-delta", records.len() as u64);
    report.tau_hat = Some(tau_hat);
    report.se = Some(se);
    report.ci = Some([tau_hat - z * se, tau_hat + z * se]);
    report.dof = Some((effect.treated.j + effect.control.j) as i64);
    Ok(report)
}

fn verify_pate(records: &[Record], est: &EffectEstimate) -> Result<serde_json::Value> {
    let data = RetainedDataset::new(records.to_vec())?;
    let dim = diff_in_means(&data)?;
    Ok(serde_json::json!({
        "diff_in_means": dim,
        "pate_minus_diff_in_means": est.tau_hat - dim,
    }))
}

fn verify_rls(records: &[Record], cfg: &StreamConfig) -> Result<(serde_json::Value, bool)> {
    let (state, _, _, _) =
        rct_stream::pipeline::run_rls_state(records.iter(), cfg, VarianceMethod::Iid)?;
    let data = RetainedDataset::new(records.to_vec())?;
    let fit = batch_ols(&data)?;
    let beta_delta = (&state.beta - &fit.beta).abs().max();
    let ssr_rel = if fit.ssr > 0.0 {
        (state.ssr - fit.ssr).abs() / fit.ssr
    } else {
        (state.ssr - fit.ssr).abs()
    };
    let mut checks = vec![
        serde_json::json!({
            "name": "rls_beta_vs_batch_ols",
            "delta": beta_delta,
            "tolerance": 1e-8,
            "pass": beta_delta <= 1e-8,
        }),
        serde_json::json!({
            "name": "rls_ssr_vs_batch_ssr",
            "delta": ssr_rel,
            "tolerance": 1e-8,
            "pass": ssr_rel <= 1e-8,
        }),
    ];
    if records.iter().any(|r| r.cluster_id.is_some()) {
        let clients = partition_by_cluster(records.to_vec());
        let beta: Vec<f64> = state.beta.iter().copied().collect();
        let (variance, _) = run_simulation(
            &clients,
            &beta,
            state.z_inv.clone(),
            Transport::InProcess,
            1.0,
        )?;
        let oracle = batch_cluster_sandwich(&data, &DVector::from_vec(beta))?;
        let delta = (&variance.sigma - &oracle).abs().max();
        checks.push(serde_json::json!({
            "name": "federated_sigma_vs_batch_sandwich",
            "delta": delta,
            "tolerance": 1e-10,
            "pass": delta <= 1e-10,
        }));
    }
    let ok = checks
        .iter()
        .all(|c| c["pass"].as_bool().unwrap_or(false));
    Ok((serde_json::json!({ "checks": checks }), ok))
}
