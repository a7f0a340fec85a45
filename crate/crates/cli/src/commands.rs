use std::fs;
use std::path::Path;

use deal_core::concepts::{load_concepts, save_concepts, ConceptSet};
use deal_core::explain::{explain, to_csv, to_pgm};
use deal_core::metrics::{eval_threads, evaluate, MetricReport};
use deal_core::model::{load_checkpoint, save_checkpoint, MiniClip, Tokenizer};
use deal_core::objective::DealConfig;
use deal_core::synth::{default_taxonomy, generate, inject_spurious, load_dataset, save_dataset, Dataset, Split};
use deal_core::train::{split_validation, text_corpus, train, write_step_log, StepRecord};
use serde::Serialize;

use crate::config::{RunConfig, SplitName};
use crate::error::{io_error, CliError};

pub const CONCEPTS_FILE: &str = "concepts.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const STEP_LOG_FILE: &str = "steps.ndjson";
pub const VALIDATION_REPORT_FILE: &str = "validation_report.json";
pub const REPORT_FILE: &str = "report.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const ABLATION_JSON_FILE: &str = "ablation.json";
pub const ABLATION_TABLE_FILE: &str = "ablation.tsv";

type Result<T> = std::result::Result<T, CliError>;

/// Creates `dir`, whose parent must already exist.
fn prepare_out(dir: &Path) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(CliError::Io(format!("output parent {} does not exist", parent.display())));
        }
    }
    fs::create_dir_all(dir).map_err(io_error(dir))
}

fn require_dir(dir: &Path, what: &str) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} {} not found", dir.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} {} not found", path.display())))
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(io_error(path))
}

pub fn datagen(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (mut specs, concepts) = default_taxonomy();
    for s in &cfg.data.spurious {
        specs = inject_spurious(&specs, &s.category, s.train_probability, s.test_probability)?;
    }
    let categories: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    let train = generate(&specs, cfg.data.train_per_category, Split::Train, cfg.data.seed)?;
    let test = generate(&specs, cfg.data.test_per_category, Split::Test, cfg.data.seed)?;
    prepare_out(out)?;
    for (name, samples) in [("train", train), ("test", test)] {
        let watermarked = samples.iter().filter(|s| s.watermark_present).count();
        let dataset = Dataset {
            categories: categories.clone(),
            samples,
        };
        save_dataset(&dataset, &out.join(name))?;
        println!(
            "{name}: {} samples, {} categories, {watermarked} watermarked",
            dataset.samples.len(),
            categories.len()
        );
    }
    save_concepts(&concepts, &out.join(CONCEPTS_FILE))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, split: SplitName) -> Result<Dataset> {
    let dir = cfg.data_dir()?.join(split.dir_name());
    require_dir(&dir, "dataset split")?;
    Ok(load_dataset(&dir)?)
}

fn load_concept_file(cfg: &RunConfig) -> Result<ConceptSet> {
    let path = cfg.concepts_path()?;
    require_file(&path, "concept file")?;
    Ok(load_concepts(&path)?)
}

/// Tokenizer over every caption, category, and concept text.
pub fn corpus_tokenizer(concepts: &ConceptSet, cfg: &RunConfig) -> Result<Tokenizer> {
    let tok = Tokenizer::build(&text_corpus(concepts)?);
    if tok.len() > cfg.model.vocab_size {
        return Err(CliError::Config(format!(
            "corpus has {} tokens but model.vocab_size is {}",
            tok.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(tok)
}

/// Prints per-epoch means of the step log as training proceeds.
struct Progress {
    epochs: usize,
    epoch: usize,
    sums: [f64; 4],
    steps: usize,
}

impl Progress {
    fn new(epochs: usize) -> Self {
        Progress {
            epochs,
            epoch: 0,
            sums: [0.0; 4],
            steps: 0,
        }
    }

    fn record(&mut self, r: &StepRecord) {
        if r.epoch != self.epoch {
            self.flush();
            self.epoch = r.epoch;
        }
        for (s, v) in self.sums.iter_mut().zip([r.contr, r.disen, r.local, r.total]) {
            *s += v;
        }
        self.steps += 1;
    }

    fn flush(&mut self) {
        if self.steps == 0 {
            return;
        }
        let n = self.steps as f64;
        let [c, d, l, t] = self.sums.map(|s| s / n);
        eprintln!(
            "epoch {:>3}/{}  contr {c:.4}  disen {d:.4}  local {l:.4}  total {t:.4}",
            self.epoch + 1,
            self.epochs
        );
        self.sums = [0.0; 4];
        self.steps = 0;
    }
}

/// Trains a fresh model on the training part of the validation split.
pub fn fit(cfg: &RunConfig, data: &Dataset, concepts: &ConceptSet) -> Result<(MiniClip, Tokenizer, Vec<StepRecord>, Dataset)> {
    let (train_part, validation) = split_validation(data, cfg.data.validation_fraction, cfg.train.seed)?;
    let tok = corpus_tokenizer(concepts, cfg)?;
    let mut model = MiniClip::new(cfg.model.clone())?;
    let mut progress = Progress::new(cfg.train.epochs);
    let log = train(&train_part, concepts, &mut model, &tok, &cfg.deal, &cfg.train, |r| progress.record(r))?;
    progress.flush();
    Ok((model, tok, log, validation))
}

pub fn report(cfg: &RunConfig, model: &MiniClip, tok: &Tokenizer, data: &Dataset, concepts: &ConceptSet) -> Result<MetricReport> {
    Ok(evaluate(
        model,
        tok,
        data,
        concepts,
        cfg.eval.backend,
        cfg.eval.metrics,
        cfg.eval.threshold,
        eval_threads(),
    )?)
}

fn summarize(label: &str, r: &MetricReport) {
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{label}: disentanglability {}  localizability {}  accuracy {}  miou {}  ({} samples)",
        show(r.disentanglability),
        show(r.localizability),
        show(r.accuracy),
        show(r.miou),
        r.samples
    );
}

fn validate_training(cfg: &RunConfig) -> Result<()> {
    cfg.deal.validate()?;
    cfg.train.validate()?;
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    validate_training(cfg)?;
    let out = cfg.out_dir()?;
    let data = load_split(cfg, SplitName::Train)?;
    let concepts = load_concept_file(cfg)?;
    prepare_out(out)?;
    let (model, tok, log, validation) = fit(cfg, &data, &concepts)?;
    save_checkpoint(&model, &tok, &out.join(CHECKPOINT_DIR))?;
    let mut steps = Vec::new();
    write_step_log(&log, &mut steps).expect("writing to memory");
    let path = out.join(STEP_LOG_FILE);
    fs::write(&path, steps).map_err(io_error(&path))?;
    write(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
    if validation.samples.is_empty() {
        eprintln!("validation split is empty; no validation report written");
    } else {
        let r = report(cfg, &model, &tok, &validation, &concepts)?;
        write(&out.join(VALIDATION_REPORT_FILE), &r.to_json())?;
        summarize("validation", &r);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(MiniClip, Tokenizer)> {
    let dir = cfg.checkpoint_dir()?;
    require_dir(dir, "checkpoint")?;
    Ok(load_checkpoint(dir)?)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (model, tok) = load_model(cfg)?;
    let data = load_split(cfg, cfg.eval.split)?;
    let concepts = load_concept_file(cfg)?;
    prepare_out(out)?;
    let r = report(cfg, &model, &tok, &data, &concepts)?;
    write(&out.join(REPORT_FILE), &r.to_json())?;
    summarize(cfg.eval.split.dir_name(), &r);
    Ok(())
}

/// Lowercase ASCII letters and digits, other runs collapsed to `-`.
pub fn slug(text: &str) -> String {
    let mut out = String::new();
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.is_empty() && !out.ends_with('-') {
            out.push('-');
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

pub fn explain_cmd(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (model, tok) = load_model(cfg)?;
    let data = load_split(cfg, cfg.explain.split)?;
    let concepts = load_concept_file(cfg)?;

    // Resolve every request before writing anything.
    let mut jobs = Vec::new();
    for &index in &cfg.explain.samples {
        let sample = data.samples.get(index).ok_or_else(|| {
            CliError::Config(format!("sample {index} out of range: split has {} samples", data.samples.len()))
        })?;
        let category = &data.categories[sample.category_index];
        let entry = concepts
            .get(category)
            .ok_or_else(|| deal_core::DealError::UnknownCategory(category.clone()))?;
        let wanted: Vec<String> = if cfg.explain.concepts.is_empty() {
            entry.concepts.clone()
        } else {
            cfg.explain.concepts.clone()
        };
        for c in wanted {
            if !entry.concepts.contains(&c) && c != entry.name {
                return Err(CliError::Config(format!(
                    "unknown concept {c:?} for sample {index} ({category}); valid: {}",
                    entry.concepts.join(", ")
                )));
            }
            jobs.push((index, sample.image_tensor(), c));
        }
    }
    prepare_out(out)?;
    let bound = model.bind(true);
    for (index, image, concept) in jobs {
        let h = explain(&bound, &tok, &image, &concept, cfg.eval.backend)?;
        let stem = format!("{index}_{}", slug(&concept));
        write(&out.join(format!("{stem}.pgm")), &to_pgm(&h))?;
        write(&out.join(format!("{stem}.csv")), &to_csv(&h))?;
        println!("{stem}: {}", if h.degenerate { "degenerate" } else { "ok" });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub lambda: f64,
    pub gamma: f64,
    pub disentanglability: Option<f64>,
    pub localizability: Option<f64>,
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Baseline, without the disentanglement term, without the localization
/// term, and the full objective, all from one seed.
pub fn ablation_variants(deal: &DealConfig) -> Vec<(&'static str, DealConfig)> {
    vec![
        ("baseline", DealConfig { lambda: 0.0, gamma: 0.0, ..deal.clone() }),
        ("without-disen", DealConfig { lambda: 0.0, ..deal.clone() }),
        ("without-local", DealConfig { gamma: 0.0, ..deal.clone() }),
        ("deal", deal.clone()),
    ]
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tdisentanglability\tlocalizability\tmiou\taccuracy\n");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), deal_core::format::sig17);
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            cell(r.disentanglability),
            cell(r.localizability),
            cell(r.miou),
            cell(r.accuracy)
        ));
    }
    s
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    validate_training(cfg)?;
    let out = cfg.out_dir()?;
    let train_data = load_split(cfg, SplitName::Train)?;
    let eval_data = load_split(cfg, cfg.eval.split)?;
    let concepts = load_concept_file(cfg)?;
    prepare_out(out)?;
    let mut rows = Vec::new();
    for (name, deal) in ablation_variants(&cfg.deal) {
        eprintln!("variant {name}: lambda {} gamma {}", deal.lambda, deal.gamma);
        let run = RunConfig {
            deal: deal.clone(),
            ..cfg.clone()
        };
        let (model, tok, _, _) = fit(&run, &train_data, &concepts)?;
        let r = report(&run, &model, &tok, &eval_data, &concepts)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            lambda: deal.lambda,
            gamma: deal.gamma,
            disentanglability: r.disentanglability,
            localizability: r.localizability,
            miou: r.miou,
            accuracy: r.accuracy,
        });
    }
    let mut json = deal_core::format::to_json_pretty(&rows);
    json.push('\n');
    write(&out.join(ABLATION_JSON_FILE), &json)?;
    let table = ablation_table(&rows);
    write(&out.join(ABLATION_TABLE_FILE), &table)?;
    print!("{table}");
    Ok(())
}
