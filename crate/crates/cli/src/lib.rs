//! Subcommands of the `fersnet` binary. Each command takes a resolved
//! [`CliConfig`] and a writer for its human-readable output, so tests can
//! drive them without spawning a process.

pub mod config;

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use fersnet_core::checkpoint::{load_model, save_model};
use fersnet_core::data::image::save_png;
use fersnet_core::data::{
    generate_toy_dataset, identity_folds, load_manifest, load_samples, CropConfig, Sample, CLASS_NAMES,
};
use fersnet_core::model::{FersnetModel, Generator, Recognizer};
use fersnet_core::nn::Mode;
use fersnet_core::train::eval::eval_view;
use fersnet_core::train::{evaluate_fer, export_gate_visualizations, run_ablation, train};
use fersnet_core::{Error, Tensor};

pub use config::{CliConfig, RunOptions, ToyGen};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Anything that failed while running; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::Runtime(format!("writing output: {e}"))
}

/// Fixed output layout under `--out`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn config_echo(&self) -> PathBuf {
        self.root.join("config.echo")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    fn prepare(&self, cfg: &CliConfig) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.root).map_err(|e| io_err(&self.root, e))?;
        let p = self.config_echo();
        std::fs::write(&p, cfg.echo()).map_err(|e| io_err(&p, e))
    }

    fn write_report(&self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let dir = self.reports();
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }
}

fn short_name(class: usize) -> String {
    match CLASS_NAMES.get(class) {
        Some(n) => {
            let mut s: String = n.chars().take(2).collect();
            s[..1].make_ascii_uppercase();
            s
        }
        None => format!("c{class}"),
    }
}

/// Per-class image counts as a two-row table.
pub fn counts_table(counts: &[usize]) -> String {
    let mut head = format!("{:<11}", "Expression");
    let mut row = format!("{:<11}", "Images");
    for (c, n) in counts.iter().enumerate() {
        let _ = write!(head, " {:>5}", short_name(c));
        let _ = write!(row, " {n:>5}");
    }
    let _ = write!(head, " {:>6}", "Total");
    let _ = write!(row, " {:>6}", counts.iter().sum::<usize>());
    format!("{head}\n{row}\n")
}

pub fn cmd_gen_data(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let t = &cfg.run.toy;
    let ds = generate_toy_dataset(Some(&layout.root), t.subjects, &t.counts, &t.face, t.seed)?;
    write!(out, "{}", counts_table(&ds.manifest.class_counts)).map_err(out_err)?;
    writeln!(out, "wrote {} images of {} subjects to {}", ds.samples.len(), t.subjects, layout.root.display())
        .map_err(out_err)?;
    Ok(())
}

/// Training and evaluation samples. Without an evaluation manifest one
/// identity fold of the main manifest is held out.
pub fn load_split(cfg: &CliConfig) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let Some(path) = &cfg.run.manifest else {
        return Err(CliError::Usage("no manifest given (set --manifest)".into()));
    };
    let arch = &cfg.train.arch;
    let canvas = cfg.train.data.canvas;
    let manifest = load_manifest(path, arch.classes)?;
    let all = load_samples(&manifest, arch.in_channels, canvas)?;
    if let Some(eval_path) = &cfg.run.eval_manifest {
        let em = load_manifest(eval_path, arch.classes)?;
        return Ok((all, load_samples(&em, arch.in_channels, canvas)?));
    }
    let folds = identity_folds(&manifest.records, cfg.run.folds, cfg.train.seed)?;
    let (tr, te) = folds.split(&manifest.records, cfg.run.holdout_fold)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    Ok((pick(&tr), pick(&te)))
}

pub fn cmd_train(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let (tr, te) = load_split(cfg)?;
    writeln!(out, "training on {} images, evaluating on {}", tr.len(), te.len()).map_err(out_err)?;
    let outcome = train(&cfg.train, &tr, (!te.is_empty()).then_some(&te[..]), Some(&layout.root))?;
    let h = &outcome.history;
    h.write_csv(&layout.history())?;
    let summary = serde_json::json!({
        "steps": h.rows.len(),
        "final_accuracy": h.final_accuracy(),
        "epoch_eval": h.epoch_eval,
        "wall_clock_secs": h.wall_clock_secs,
    });
    layout.write_report("train.json", &serde_json::to_string_pretty(&summary).expect("json"))?;
    if let Some(acc) = h.final_accuracy() {
        writeln!(out, "accuracy: {:.2}", 100.0 * acc).map_err(out_err)?;
    }
    writeln!(out, "wrote {}", layout.model().display()).map_err(out_err)?;
    Ok(())
}

fn checkpoint_path(cfg: &CliConfig) -> PathBuf {
    cfg.run.checkpoint.clone().unwrap_or_else(|| Layout::new(&cfg.run.out).model())
}

fn load_checked(cfg: &CliConfig) -> Result<FersnetModel<f32>, CliError> {
    let (model, _) = load_model(&checkpoint_path(cfg))?;
    let (n, crop) = (model.config.image_size, cfg.train.data.crop);
    if n != crop {
        return Err(CliError::Usage(format!("checkpoint expects {n}x{n} inputs but data.crop is {crop}")));
    }
    Ok(model)
}

/// Score `model` on `samples` and print the accuracy as a percentage.
pub fn report_accuracy<R: Recognizer<f32> + ?Sized>(
    model: &R,
    samples: &[Sample],
    crop: &CropConfig,
    out: &mut dyn Write,
) -> Result<f64, CliError> {
    let acc = evaluate_fer(model, samples, crop)?;
    writeln!(out, "accuracy: {:.2}", 100.0 * acc).map_err(out_err)?;
    Ok(acc)
}

pub fn cmd_eval(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_checked(cfg)?;
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let (_, te) = load_split(cfg)?;
    let acc = report_accuracy(&model, &te, &cfg.train.data, out)?;
    let report = serde_json::json!({ "accuracy": acc, "samples": te.len() });
    layout.write_report("eval.json", &serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(())
}

/// One row per sample: the source followed by its synthesis for each class.
/// Returns a `[C, rows * n, (classes + 1) * n]` image.
pub fn synth_grid<G: Generator<f32>>(
    generator: &G,
    samples: &[Sample],
    classes: usize,
    crop: &CropConfig,
) -> Result<Tensor<f32>, CliError> {
    if samples.is_empty() {
        return Err(CliError::Runtime("no samples to synthesise from".into()));
    }
    let views = samples.iter().map(|s| eval_view(&s.image, crop)).collect::<Result<Vec<_>, _>>()?;
    let x = Tensor::stack(&views.iter().collect::<Vec<_>>())?;
    let (rows, c, n) = (samples.len(), views[0].shape()[0], views[0].shape()[1]);
    let cols = classes + 1;
    let mut tiles: Vec<Tensor<f32>> = Vec::with_capacity(classes);
    for target in 0..classes {
        tiles.push(generator.generate_fwd(&x, &vec![target; rows], Mode::Eval)?.0);
    }
    let (gh, gw) = (rows * n, cols * n);
    let plane = n * n;
    let mut grid = vec![0f32; c * gh * gw];
    for r in 0..rows {
        for col in 0..cols {
            let src: &[f32] = if col == 0 { views[r].data() } else { tiles[col - 1].item(r) };
            for ch in 0..c {
                for y in 0..n {
                    let dst = ch * gh * gw + (r * n + y) * gw + col * n;
                    let from = ch * plane + y * n;
                    grid[dst..dst + n].copy_from_slice(&src[from..from + n]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[c, gh, gw], grid)?)
}

/// The first `n` samples after sorting by class, cycling through classes so
/// every expression appears when possible.
fn spread(samples: &[Sample], n: usize, classes: usize) -> Vec<Sample> {
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); classes];
    for s in samples {
        by_class[s.expression].push(s);
    }
    let mut picked = Vec::new();
    let mut round = 0;
    while picked.len() < n.min(samples.len()) {
        for c in &by_class {
            if let Some(s) = c.get(round) {
                if picked.len() < n {
                    picked.push((*s).clone());
                }
            }
        }
        round += 1;
    }
    picked
}

pub fn cmd_synth(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_checked(cfg)?;
    if !model.has_synthesis() {
        return Err(CliError::Usage("checkpoint has no synthesis path".into()));
    }
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let (_, te) = load_split(cfg)?;
    let picked = spread(&te, cfg.run.synth_samples, model.config.classes);
    let grid = synth_grid(&model, &picked, model.config.classes, &cfg.train.data)?;
    let p = layout.images().join("synth_grid.png");
    save_png(&p, &grid)?;
    writeln!(out, "wrote {} ({} rows x {} columns)", p.display(), picked.len(), model.config.classes + 1)
        .map_err(out_err)?;
    Ok(())
}

pub fn cmd_viz_gates(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_checked(cfg)?;
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let (_, te) = load_split(cfg)?;
    let picked = spread(&te, cfg.run.viz_samples, model.config.classes);
    let dir = layout.images().join("gates");
    let written = export_gate_visualizations(&model, &picked, &cfg.train.data, &dir)?;
    writeln!(out, "wrote {} gate maps for {} samples to {}", written.len(), picked.len(), dir.display())
        .map_err(out_err)?;
    Ok(())
}

pub fn cmd_ablate(cfg: &CliConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.run.out);
    layout.prepare(cfg)?;
    let (tr, te) = load_split(cfg)?;
    let outcome = run_ablation(&cfg.train, &tr, &te, &cfg.run.ablation_seeds)?;
    let table = &outcome.table;
    layout.write_report("ablation.csv", &table.to_csv())?;
    layout.write_report("ablation.txt", &table.to_text())?;
    for m in &outcome.models {
        let p = layout.root.join("ablation").join(format!("seed{}_original.ckpt", m.seed));
        save_model(&p, &m.original, serde_json::json!({ "seed": m.seed }))?;
    }
    write!(out, "{}", table.to_text()).map_err(out_err)?;
    Ok(())
}

/// Run `f` on a pool of `threads` workers, or the global pool when unset.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, CliError> {
    match threads {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}"))),
    }
}
