//! Command-line entry points. Every file write in a run happens here.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backend::StubServer;
use crate::cli_io::config::{self, apply_override, remove_path, set_path, ReferenceSpec, RunConfig, OUT_ENV};
use crate::cli_io::manifest::{list_files, sha256_hex, RunDir, RunManifest, SegmentInfo, SoftwareInfo, MANIFEST_FILE};
use crate::cli_io::metrics::{self, MetricRecord, MetricsStream, SummaryRow};
use crate::cli_io::tensor_io;
use crate::composition::relative_l2;
use crate::error::{Error, ErrorClass, Result};
use crate::expert::ScoreModel;
use crate::extension::extend;
use crate::lattice::LatticeField;
use crate::svgd::anneal_sample;

#[derive(Debug, Parser)]
#[command(name = "anneal-stein", version, about = "Annealed Stein sampling from masked products of flow experts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Anneal an ensemble against the composed target.
    Sample(RunArgs),
    /// Generate overlapping segments and concatenate them.
    Extend(RunArgs),
    /// Summarize finished runs into CSV tables.
    Metrics(MetricsArgs),
    /// Invert the context reference and write one tensor per level.
    Invert(RunArgs),
    /// Serve one configured expert over the wire protocol.
    StubServe(StubArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Annealing length T.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub inner_iters: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Drop the kernel-gradient (repulsion) term.
    #[arg(long)]
    pub no_svgd_repulsion: bool,
    /// Skip the context projection after each Stein step.
    #[arg(long)]
    pub no_context: bool,
    /// Disable the reconstruction step.
    #[arg(long)]
    pub no_recon: bool,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Raw override `dotted.key=value`, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct MetricsArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the combined table here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StubArgs {
    /// Config holding the expert definitions and schedule.
    pub config: PathBuf,
    /// Expert name; defaults to the first inline expert.
    #[arg(long)]
    pub expert: Option<String>,
    #[arg(long, default_value = "127.0.0.1:0", conflicts_with = "stdio")]
    pub listen: String,
    /// Serve a single connection on stdin/stdout.
    #[arg(long)]
    pub stdio: bool,
}

/// A validated config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Effective configuration after overrides, as stored in the run.
    pub text: String,
    pub sha256: String,
    pub base_dir: PathBuf,
    pub stem: String,
}

fn absolutize(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_config(args: &RunArgs) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let base_dir = args
        .config
        .parent()
        .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
        .unwrap_or(Path::new("."))
        .canonicalize()?;

    let set = |doc: &mut toml::Table, k: &str, v: toml::Value| set_path(doc, k, v);
    if let Some(v) = args.seed {
        let v = i64::try_from(v).map_err(|_| Error::Config("seed must fit in 63 bits".into()))?;
        set(&mut doc, "seed", v.into())?;
    }
    if let Some(v) = args.particles {
        set(&mut doc, "particles", (v as i64).into())?;
    }
    if let Some(v) = args.steps {
        set(&mut doc, "ladder.steps", (v as i64).into())?;
    }
    if let Some(v) = args.eta {
        set(&mut doc, "svgd.eta", v.into())?;
    }
    if let Some(v) = args.inner_iters {
        set(&mut doc, "svgd.inner_iters", (v as i64).into())?;
    }
    if let Some(v) = args.workers {
        set(&mut doc, "svgd.workers", (v as i64).into())?;
    }
    if args.no_svgd_repulsion {
        set(&mut doc, "svgd.repulsion", false.into())?;
    }
    if args.no_context {
        set(&mut doc, "projection", false.into())?;
    }
    if args.no_recon {
        remove_path(&mut doc, "recon");
    }
    for a in &args.set {
        apply_override(&mut doc, a)?;
    }

    let mut config = RunConfig::from_table(doc)?;
    // Stored configs must not depend on the directory they are re-run from.
    if let Some(ctx) = config.context.as_mut() {
        if let ReferenceSpec::File(p) = &mut ctx.reference {
            *p = absolutize(&base_dir, p);
        }
        if let Some(c) = ctx.cache.as_mut() {
            *c = absolutize(&base_dir, c);
        }
    }
    let text = config.to_toml();
    let stem = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    Ok(LoadedConfig {
        sha256: sha256_hex(text.as_bytes()),
        config,
        text,
        base_dir,
        stem,
    })
}

/// `--out`, then `output` in the config, then `$ANNEAL_STEIN_OUT/<stem>`,
/// then `runs/<stem>`.
pub fn output_dir(args: &RunArgs, loaded: &LoadedConfig) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &loaded.config.output {
        return o.clone();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(&loaded.stem),
        _ => PathBuf::from("runs").join(&loaded.stem),
    }
}

pub fn particle_file(i: usize) -> String {
    format!("particle_{i:04}.lt")
}

pub fn segment_dir(s: usize) -> String {
    format!("segment_{s:03}")
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SEQUENCE_FILE: &str = "sequence.lt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRAJECTORY_FILE: &str = "density_trajectory.csv";

/// Metric sink that remembers the first write failure instead of panicking
/// inside the sampler callback.
struct Recorder {
    stream: MetricsStream,
    records: Vec<MetricRecord>,
    failure: Option<Error>,
}

impl Recorder {
    fn new(path: &Path) -> Result<Self> {
        Ok(Self {
            stream: MetricsStream::create(path)?,
            records: Vec::new(),
            failure: None,
        })
    }

    fn push(&mut self, rec: MetricRecord) {
        if self.failure.is_none() {
            if let Err(e) = self.stream.push(&rec) {
                self.failure = Some(e);
            }
        }
        self.records.push(rec);
    }

    fn finish(self) -> Result<Vec<MetricRecord>> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.records),
        }
    }
}

pub fn cmd_sample(args: &RunArgs) -> Result<PathBuf> {
    let loaded = load_config(args)?;
    let cfg = &loaded.config;
    let mut target = cfg.build_target(&loaded.base_dir)?;
    let mut dir = RunDir::create(&output_dir(args, &loaded))?;
    dir.write(CONFIG_FILE, loaded.text.as_bytes())?;

    let start = Instant::now();
    let mut rec = Recorder::new(&dir.path(METRICS_FILE))?;
    let ens = anneal_sample(&mut target, &cfg.svgd, cfg.particles, cfg.seed, &mut |r| {
        rec.push(MetricRecord::from_step(None, r))
    })?;
    let records = rec.finish()?;
    dir.adopt(METRICS_FILE)?;
    for (i, p) in ens.particles().iter().enumerate() {
        dir.write(&format!("particles/{}", particle_file(i)), &tensor_io::encode(p))?;
    }
    let manifest = RunManifest {
        software: SoftwareInfo::current(),
        command: "sample".into(),
        config_sha256: loaded.sha256.clone(),
        seed: cfg.seed,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
        records,
        artifacts: dir.take_artifacts(),
        segments: Vec::new(),
    };
    dir.write_manifest(&manifest)?;
    Ok(dir.root().to_path_buf())
}

pub fn cmd_extend(args: &RunArgs) -> Result<PathBuf> {
    let loaded = load_config(args)?;
    let cfg = &loaded.config;
    let (plan, settings) = cfg.build_extension(&loaded.base_dir)?;
    plan.validate()?;
    let mut dir = RunDir::create(&output_dir(args, &loaded))?;
    dir.write(CONFIG_FILE, loaded.text.as_bytes())?;

    let start = Instant::now();
    let mut rec = Recorder::new(&dir.path(METRICS_FILE))?;
    let out = extend(&plan, &settings, &mut |s, r| rec.push(MetricRecord::from_step(Some(s), r)))?;
    let records = rec.finish()?;
    dir.adopt(METRICS_FILE)?;
    dir.write(SEQUENCE_FILE, &tensor_io::encode(&out.sequence))?;

    let mut segments = Vec::with_capacity(out.segments.len());
    for seg in &out.segments {
        let sd = segment_dir(seg.index);
        let mut sub = RunDir::create(&dir.path(&sd))?;
        for (i, p) in seg.ensemble.particles().iter().enumerate() {
            sub.write(&particle_file(i), &tensor_io::encode(p))?;
        }
        let sm = RunManifest {
            software: SoftwareInfo::current(),
            command: "extend-segment".into(),
            config_sha256: loaded.sha256.clone(),
            seed: seg.seed,
            wall_clock_secs: None,
            records: seg.records.iter().map(|r| MetricRecord::from_step(Some(seg.index), r)).collect(),
            artifacts: sub.take_artifacts(),
            segments: Vec::new(),
        };
        sub.write_manifest(&sm)?;
        for a in &sm.artifacts {
            dir.adopt(&format!("{sd}/{}", a.path))?;
        }
        let mrel = format!("{sd}/{MANIFEST_FILE}");
        dir.adopt(&mrel)?;
        segments.push(SegmentInfo {
            index: seg.index,
            seed: seg.seed,
            overlap_error: seg.overlap_error,
            manifest: mrel,
        });
    }
    let manifest = RunManifest {
        software: SoftwareInfo::current(),
        command: "extend".into(),
        config_sha256: loaded.sha256.clone(),
        seed: cfg.seed,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
        records,
        artifacts: dir.take_artifacts(),
        segments,
    };
    dir.write_manifest(&manifest)?;
    Ok(dir.root().to_path_buf())
}

/// Writes `z_XXXX.lt` for every level and returns the run directory and the
/// relative error of the level-0 field against the reference.
pub fn cmd_invert(args: &RunArgs) -> Result<(PathBuf, f64)> {
    let loaded = load_config(args)?;
    let cfg = &loaded.config;
    let start = Instant::now();
    let cond = cfg.compute_conditionals(&loaded.base_dir)?;
    let err = relative_l2(&cond.levels()[0], cond.reference())?;
    let mut dir = RunDir::create(&output_dir(args, &loaded))?;
    dir.write(CONFIG_FILE, loaded.text.as_bytes())?;
    dir.write("reference.lt", &tensor_io::encode(cond.reference()))?;
    for (t, z) in cond.levels().iter().enumerate() {
        dir.write(&config::level_file(t), &tensor_io::encode(z))?;
    }
    let manifest = RunManifest {
        software: SoftwareInfo::current(),
        command: "invert".into(),
        config_sha256: loaded.sha256.clone(),
        seed: cfg.seed,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
        records: Vec::new(),
        artifacts: dir.take_artifacts(),
        segments: Vec::new(),
    };
    dir.write_manifest(&manifest)?;
    Ok((dir.root().to_path_buf(), err))
}

fn read_particles(dir: &Path, files: &[String], prefix: &str) -> Result<Vec<LatticeField>> {
    files
        .iter()
        .filter(|f| f.starts_with(prefix) && f[prefix.len()..].starts_with("particle_"))
        .map(|f| tensor_io::read_tensor(&dir.join(f)))
        .collect()
}

/// Summary rows for one run; writes the CSVs into the run and re-lists them
/// in its manifest.
pub fn summarize_run(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut manifest = RunManifest::load(dir)?;
    let cfg_text = std::fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|_| Error::NotARun(dir.to_path_buf()))?;
    let cfg = RunConfig::parse(&cfg_text)?;
    let files: Vec<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
    let name = dir.display().to_string();
    let rows = match manifest.command.as_str() {
        "sample" => {
            let ps = read_particles(dir, &files, "particles/")?;
            vec![metrics::summary_row(&name, "sample", &cfg, &ps, &manifest.records, &[])]
        }
        "extend" => manifest
            .segments
            .iter()
            .map(|s| {
                let prefix = format!("{}/", segment_dir(s.index));
                let ps = read_particles(dir, &files, &prefix)?;
                let recs: Vec<MetricRecord> =
                    manifest.records.iter().filter(|r| r.segment == Some(s.index)).cloned().collect();
                let errs: Vec<f64> = s.overlap_error.into_iter().collect();
                let mut row = metrics::summary_row(&format!("{name}#{}", s.index), "extend", &cfg, &ps, &recs, &errs);
                row.seed = s.seed;
                let shifted = cfg.segments.map_or(0.0, |g| g.mean_shift) * s.index as f64;
                if shifted != 0.0 {
                    row.oracle_mean = row.oracle_mean.map(|m| m + shifted);
                }
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?,
        other => return Err(Error::Config(format!("{}: no metrics for '{other}' runs", dir.display()))),
    };
    let rd = dir.join(SUMMARY_FILE);
    let sb = metrics::write_summary_csv(&rd, &rows)?;
    let tb = metrics::write_trajectory_csv(&dir.join(TRAJECTORY_FILE), &manifest.records)?;
    for (path, bytes) in [(SUMMARY_FILE, sb), (TRAJECTORY_FILE, tb)] {
        manifest.artifacts.retain(|a| a.path != path);
        manifest.artifacts.push(crate::cli_io::manifest::Artifact {
            path: path.into(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_json())?;
    Ok(rows)
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<Vec<SummaryRow>> {
    let mut all = Vec::new();
    for d in &args.runs {
        all.extend(summarize_run(d)?);
    }
    if let Some(p) = &args.summary {
        metrics::write_summary_csv(p, &all)?;
    }
    Ok(all)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<36} {:>6} {:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
        "run", "seed", "rep", "mean", "oracle_m", "var", "oracle_v", "diversity", "overlap"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<36} {:>6} {:>4} {:>10.5} {:>10} {:>10.5} {:>10} {:>10.5} {:>10}\n",
            r.run,
            r.seed,
            if r.repulsion { "on" } else { "off" },
            r.sample_mean,
            fmt_opt(r.oracle_mean),
            r.sample_var,
            fmt_opt(r.oracle_var),
            r.mean_pairwise_distance,
            fmt_opt(r.overlap_error_max),
        ));
    }
    s
}

pub fn cmd_stub_serve(args: &StubArgs) -> Result<()> {
    let run = RunArgs {
        config: args.config.clone(),
        seed: None,
        particles: None,
        steps: None,
        eta: None,
        inner_iters: None,
        workers: None,
        no_svgd_repulsion: false,
        no_context: false,
        no_recon: false,
        out: None,
        set: Vec::new(),
    };
    let loaded = load_config(&run)?;
    let cfg = &loaded.config;
    let spec = match &args.expert {
        Some(n) => cfg
            .experts
            .iter()
            .find(|e| &e.name == n)
            .ok_or_else(|| Error::Config(format!("unknown expert '{n}'")))?,
        None => cfg
            .experts
            .iter()
            .find(|e| e.gmm.is_some())
            .ok_or_else(|| Error::Config("no inline expert to serve".into()))?,
    };
    let gmm = spec
        .gmm
        .as_ref()
        .ok_or_else(|| Error::Config(format!("expert '{}' is remote; only inline experts can be served", spec.name)))?;
    let expert: std::sync::Arc<dyn ScoreModel> = std::sync::Arc::new(gmm.build(&spec.name, cfg.shape(), 0.0)?);
    let server = StubServer::new(expert, cfg.schedule()?);
    if args.stdio {
        return server.serve_stdio();
    }
    let listener = std::net::TcpListener::bind(&args.listen)?;
    println!("{}", json!({ "listening": listener.local_addr()?.to_string(), "expert": spec.name }));
    server.serve_tcp(listener)
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Runtime => 3,
        ErrorClass::Protocol => 4,
        ErrorClass::Other => 1,
    }
}

/// Machine-readable error record for stderr.
pub fn error_record(e: &Error) -> serde_json::Value {
    json!({
        "error": e.kind(),
        "class": format!("{:?}", e.class()).to_lowercase(),
        "exit_code": exit_code(e),
        "message": e.to_string(),
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(a) => {
            let dir = cmd_sample(&a)?;
            println!("{}", json!({ "command": "sample", "run": dir }));
        }
        Command::Extend(a) => {
            let dir = cmd_extend(&a)?;
            let m = RunManifest::load(&dir)?;
            let errs: Vec<Option<f64>> = m.segments.iter().map(|s| s.overlap_error).collect();
            println!("{}", json!({ "command": "extend", "run": dir, "overlap_errors": errs }));
        }
        Command::Invert(a) => {
            let (dir, err) = cmd_invert(&a)?;
            println!("{}", json!({ "command": "invert", "run": dir, "z0_relative_error": err }));
        }
        Command::Metrics(a) => {
            let rows = cmd_metrics(&a)?;
            print!("{}", render_table(&rows));
        }
        Command::StubServe(a) => cmd_stub_serve(&a)?,
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs. Returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            exit_code(&e)
        }
    }
}

/// Files under a run directory that its manifest does not list.
pub fn orphan_files(dir: &Path) -> Result<Vec<String>> {
    let m = RunManifest::load(dir)?;
    Ok(list_files(dir)?
        .into_iter()
        .filter(|f| m.artifact(f).is_none())
        .collect())
}
