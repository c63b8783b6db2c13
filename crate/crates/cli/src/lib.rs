//! Command-line surface: every subcommand reads an experiment config,
//! honors `--seed` and writes under `--out`. Failures print one
//! `error: kind=<kind> message="<text>"` line and exit nonzero.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use varcast::data::{
    extract_pretrain_samples, load_dataset, split, synth_generate, windows, write_dataset, Dataset,
    ExperimentConfig, Split,
};
use varcast::graph_learning::GraphMode;
use varcast::model::{
    build_model, count_parameters, evaluate, finetune, forward, load_checkpoint, reference_reconciliation, predict,
    pretrain, save_checkpoint, Binding, CountMode, ForwardOptions, LogRecord, Metrics, Mode, Model,
};
use varcast::tensor::{Graph, RngStream, Tensor};
use varcast::tokenizer::{normalize, SeriesBatch};

#[derive(Parser, Debug)]
#[command(name = "varcast", version, about = "Multivariate patch forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Ci,
    Cm,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ci => Mode::Ci,
            ModeArg::Cm => Mode::Cm,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Channel-independent pretraining on univariate windows of the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finetune a checkpoint on multivariate windows.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "cm")]
        mode: ModeArg,
    },
    /// Forecast the `F` steps after the last look-back of a CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "cm")]
        mode: ModeArg,
        /// Also write per-layer attention weights.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Test-split metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "cm")]
        mode: ModeArg,
    },
    /// Similarity and hard adjacency for one test window.
    InspectGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the test-split windows.
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Per-expert selection counts over the test split.
    InspectExperts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "cm")]
        mode: ModeArg,
    },
    /// Parameter breakdown of the configured model.
    ParamCount {
        #[arg(long, required_unless_present = "reference")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the reconciliation against the published totals.
        #[arg(long)]
        reference: bool,
    },
    /// Write the configured synthetic dataset as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={first:?}");
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} message={:?}", error_kind(&e), format!("{e:#}"));
            1
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<varcast::Error>().map(varcast::Error::kind))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("invalid_argument")
}

struct Run {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn new(common: &Common) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(s) = common.seed {
            cfg.train.seed = s;
        }
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self {
            seed: cfg.train.seed,
            cfg,
            out: common.out.clone(),
        })
    }

    fn window(&self) -> usize {
        self.cfg.model.lookback + self.cfg.model.horizon()
    }

    fn dataset(&self) -> Result<(String, Dataset)> {
        let d = &self.cfg.data;
        if let Some(path) = &d.path {
            let ds = load_dataset(path)?;
            let name = d
                .name
                .clone()
                .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
                .unwrap_or_else(|| "data".into());
            return Ok((name, ds));
        }
        let preset = d.preset.ok_or_else(|| anyhow!("data.path or data.preset must be set"))?;
        let spec = preset.spec(
            d.channels,
            d.length,
            d.delay.unwrap_or(self.cfg.model.patch),
            d.seed.unwrap_or(self.seed),
        );
        let name = d.name.clone().unwrap_or_else(|| format!("{preset:?}").to_lowercase());
        Ok((name, synth_generate(&spec)?))
    }

    fn split(&self, ds: &Dataset) -> Result<Split> {
        Ok(split(ds.len(), self.cfg.data.scheme, self.window())?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn forward_options(&self, mode: Mode) -> ForwardOptions {
        match mode {
            Mode::Ci => ForwardOptions::ci(),
            Mode::Cm => ForwardOptions::cm(GraphMode::Eval, RngStream::new(self.seed)),
        }
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Ci => "ci",
        Mode::Cm => "cm",
    }
}

fn write_metrics(run: &Run, dataset: &str, mode: Mode, m: &Metrics) -> Result<()> {
    let text = format!(
        "dataset,mode,mse,mae,r2\n{dataset},{},{:.16e},{:.16e},{:.16e}\n",
        mode_name(mode),
        m.mse,
        m.mae,
        m.r2
    );
    write_atomic(&run.path("metrics.csv"), text.as_bytes())?;
    println!("{dataset} {}: mse {:.6} mae {:.6} r2 {:.4}", mode_name(mode), m.mse, m.mae, m.r2);
    Ok(())
}

fn write_log(run: &Run, records: &[LogRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(&run.path("train_log.jsonl"), text.as_bytes())
}

fn test_windows(run: &Run, ds: &Dataset, s: &Split) -> Result<Vec<Tensor>> {
    Ok(windows(&ds.values, s.test.clone(), run.window())?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { common, checkpoint } => {
            let run = Run::new(&common)?;
            let (name, ds) = run.dataset()?;
            let s = run.split(&ds)?;
            let w = run.window();
            let train = extract_pretrain_samples(&[ds.slice_time(s.train.clone())?], w, run.seed)?;
            let val = extract_pretrain_samples(&[ds.slice_time(s.val.clone())?], w, run.seed)?;
            let mut model = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => build_model(&run.cfg.model_config(), &mut RngStream::new(run.seed))?,
            };
            log::info!("pretraining on {} windows of {name}", train.len());
            let report = pretrain(&mut model, &train, &val, &run.cfg.train, &mut |_| {})?;
            write_log(&run, &report.records)?;
            save_checkpoint(&model, &run.path("model.ckpt"))?;
            let m = evaluate(&model, &test_windows(&run, &ds, &s)?, &ForwardOptions::ci(), run.cfg.train.batch_size)?;
            write_metrics(&run, &name, Mode::Ci, &m)
        }
        Command::Finetune { common, checkpoint, mode } => {
            let run = Run::new(&common)?;
            let mode = Mode::from(mode);
            let (name, ds) = run.dataset()?;
            let s = run.split(&ds)?;
            let w = run.window();
            let mut model = load_checkpoint(&checkpoint)?;
            let train = windows(&ds.values, s.train.clone(), w)?;
            let val = windows(&ds.values, s.val.clone(), w)?;
            let report = finetune(&mut model, &train, &val, &run.cfg.train, mode, &mut |_| {})?;
            write_log(&run, &report.records)?;
            save_checkpoint(&model, &run.path("model.ckpt"))?;
            let m = evaluate(&model, &test_windows(&run, &ds, &s)?, &run.forward_options(mode), run.cfg.train.batch_size)?;
            write_metrics(&run, &name, mode, &m)
        }
        Command::Eval { common, checkpoint, mode } => {
            let run = Run::new(&common)?;
            let mode = Mode::from(mode);
            let (name, ds) = run.dataset()?;
            let s = run.split(&ds)?;
            let model = load_checkpoint(&checkpoint)?;
            let m = evaluate(&model, &test_windows(&run, &ds, &s)?, &run.forward_options(mode), run.cfg.train.batch_size)?;
            write_metrics(&run, &name, mode, &m)
        }
        Command::Predict {
            common,
            checkpoint,
            input,
            mode,
            dump_attention,
        } => {
            let run = Run::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&input)?;
            cmd_predict(&run, &model, &ds, mode.into(), dump_attention)
        }
        Command::InspectGraph {
            common,
            checkpoint,
            window,
        } => {
            let run = Run::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let (_, ds) = run.dataset()?;
            let s = run.split(&ds)?;
            let ws = test_windows(&run, &ds, &s)?;
            let w = ws
                .get(window)
                .ok_or_else(|| anyhow!("window {window} outside the {} test windows", ws.len()))?;
            cmd_inspect_graph(&run, &model, &ds.names, w)
        }
        Command::InspectExperts {
            common,
            checkpoint,
            mode,
        } => {
            let run = Run::new(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let (_, ds) = run.dataset()?;
            let s = run.split(&ds)?;
            cmd_inspect_experts(&run, &model, &test_windows(&run, &ds, &s)?, mode.into())
        }
        Command::ParamCount {
            config,
            seed: _,
            out,
            reference,
        } => {
            let mut text = String::new();
            if let Some(path) = config {
                let cfg = ExperimentConfig::load(&path)?.model_config();
                for (label, mode) in [("pretrain", CountMode::Pretrain), ("finetune", CountMode::Finetune)] {
                    let c = count_parameters(&cfg, mode)?;
                    writeln!(text, "[{label}]")?;
                    for (k, v) in &c.breakdown {
                        writeln!(text, "{k} {v}")?;
                    }
                    writeln!(text, "total {}", c.total)?;
                }
            }
            if reference {
                text.push_str(&reference_reconciliation());
            }
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("param_count.txt"), text.as_bytes())?;
            }
            Ok(())
        }
        Command::Synth { common } => {
            let run = Run::new(&common)?;
            if run.cfg.data.preset.is_none() {
                bail!("synth needs data.preset");
            }
            let (name, ds) = run.dataset()?;
            let mut buf = Vec::new();
            write_dataset(&ds, &mut buf)?;
            let path = run.path(&format!("{name}.csv"));
            write_atomic(&path, &buf)?;
            println!("{} ({} channels, {} steps)", path.display(), ds.channels(), ds.len());
            Ok(())
        }
    }
}

fn cmd_predict(run: &Run, model: &Model, ds: &Dataset, mode: Mode, dump_attention: bool) -> Result<()> {
    let l = model.cfg.lookback;
    if ds.len() < l {
        bail!(varcast::Error::Data(format!("input has {} steps, the model needs {l}", ds.len())));
    }
    let c = ds.channels();
    let look = ds.slice_time(ds.len() - l..ds.len())?;
    let x = look.reshape(&[1, c, l])?;
    let mut opts = run.forward_options(mode);
    let y = predict(model, &x, &mut opts)?;
    let f = y.shape()[2];
    let mut text = String::from("channel");
    for k in 1..=f {
        write!(text, ",t+{k}")?;
    }
    text.push('\n');
    for (i, row) in y.data().chunks(f).enumerate() {
        text.push_str(&ds.names[i]);
        for v in row {
            write!(text, ",{v:.16e}")?;
        }
        text.push('\n');
    }
    write_atomic(&run.path("forecast.csv"), text.as_bytes())?;
    if dump_attention {
        let batch = normalize(&SeriesBatch::new(x, None)?)?;
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &model.params, &|_| false);
        let mut opts = run.forward_options(mode);
        let out = forward(&mut g, &bind, model, &batch, &mut opts)?;
        for (layer, &p) in out.probs.iter().enumerate() {
            let t = g.value(p);
            let s = t.shape();
            let (h, q, k) = (s[1], s[2], s[3]);
            let mut text = String::from("instance,head,query,key,weight\n");
            for (idx, v) in t.data().iter().enumerate() {
                let (inst, rem) = (idx / (h * q * k), idx % (h * q * k));
                writeln!(text, "{inst},{},{},{},{v:.16e}", rem / (q * k), (rem / k) % q, rem % k)?;
            }
            write_atomic(&run.path(&format!("attention_layer{layer}.csv")), text.as_bytes())?;
        }
    }
    println!("forecast: {c} channels x {f} steps");
    Ok(())
}

fn matrix_csv(names: &[String], m: &[f64]) -> Result<String> {
    let c = names.len();
    let mut text = String::from("channel");
    for n in names {
        write!(text, ",{n}")?;
    }
    text.push('\n');
    for (i, row) in m.chunks(c).enumerate() {
        text.push_str(&names[i]);
        for v in row {
            write!(text, ",{v:.16e}")?;
        }
        text.push('\n');
    }
    Ok(text)
}

fn cmd_inspect_graph(run: &Run, model: &Model, names: &[String], window: &Tensor) -> Result<()> {
    let l = model.cfg.lookback;
    let c = window.shape()[0];
    let batch = normalize(&SeriesBatch::from_windows(&window.clone().reshape(&[1, c, window.shape()[1]])?, l)?)?;
    let mut g = Graph::new();
    let bind = Binding::new(&mut g, &model.params, &|_| false);
    let mut opts = run.forward_options(Mode::Cm);
    let out = forward(&mut g, &bind, model, &batch, &mut opts)?;
    let (Some(z), Some(adj)) = (out.similarity, out.adjacency) else {
        bail!(varcast::Error::Config("the model has no graph-guided layers".into()));
    };
    write_atomic(&run.path("graph_z.csv"), matrix_csv(names, g.value(z).data())?.as_bytes())?;
    write_atomic(&run.path("graph_hard.csv"), matrix_csv(names, adj.hard.data())?.as_bytes())?;
    let edges = adj.hard.data().iter().filter(|&&v| v > 0.5).count() - c;
    println!("graph: {c} channels, {edges} off-diagonal edges");
    Ok(())
}

fn cmd_inspect_experts(run: &Run, model: &Model, windows: &[Tensor], mode: Mode) -> Result<()> {
    let moe_layers: Vec<usize> = (0..model.cfg.layers).filter(|&l| model.is_moe(l)).collect();
    if moe_layers.is_empty() {
        bail!(varcast::Error::Config("the model has no MoE layers".into()));
    }
    let n_p = model.cfg.moe.n_private;
    let mut counts = vec![vec![0u64; n_p]; model.cfg.layers];
    for chunk in windows.chunks(run.cfg.train.batch_size.max(1)) {
        let batch = normalize(&SeriesBatch::from_windows(&Tensor::stack(chunk)?, model.cfg.lookback)?)?;
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &model.params, &|_| false);
        let mut opts = run.forward_options(mode);
        let out = forward(&mut g, &bind, model, &batch, &mut opts)?;
        for (l, a) in out.assignments.iter().enumerate() {
            if let Some(a) = a {
                counts[l].iter_mut().zip(&a.counts).for_each(|(t, c)| *t += c);
            }
        }
    }
    for &l in &moe_layers {
        let mut text = String::from("expert_id,count\n");
        for (e, c) in counts[l].iter().enumerate() {
            writeln!(text, "{e},{c}")?;
        }
        write_atomic(&run.path(&format!("experts_layer{l}.csv")), text.as_bytes())?;
        let (lo, hi) = (counts[l].iter().min().unwrap(), counts[l].iter().max().unwrap());
        println!("layer {l}: {} selections, min {lo}, max {hi}", counts[l].iter().sum::<u64>());
    }
    Ok(())
}
