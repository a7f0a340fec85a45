//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 7 compare trained models against each other. Their lines
//! are always printed with the measured numbers; they only fail the process
//! when `DEAL_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use deal_core::concepts::{build_caption, build_llm_prompt, ConceptSet};
use deal_core::explain::{binarize, normalize, to_pgm, upsample_nearest, Backend, Explainer, Heatmap, Normalization};
use deal_core::metrics::{
    accuracy, blurred_canvas, disentanglability_of_maps, eval_threads, evaluate, iauc_for_heatmap, iauc_from_scores, iou,
    predict_from_similarities, ConceptBank, MetricReport, MetricSelection, DEFAULT_THRESHOLD,
};
use deal_core::model::{similarity, MiniClip, MiniClipConfig, Tokenizer};
use deal_core::objective::{adam_update, infonce, r_disen, r_local, AdamState, DealConfig, DistMetric, TrainConfig};
use deal_core::synth::{default_taxonomy, generate, inject_spurious, CategorySpec, Dataset, Split, IMAGE_SIZE};
use deal_core::train::{epoch_batches, text_corpus, train, StepRecord};
use deal_tensor::{backward, catalog, grad_check, Init, Order, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_PER_CATEGORY: usize = 25;
const TEST_PER_CATEGORY: usize = 10;
const MARGIN: f64 = 0.05;
const RANDOM_MAPS: usize = 20;
const TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Fixture {
    train: Dataset,
    test: Dataset,
    concepts: ConceptSet,
    tok: Tokenizer,
}

fn fixture(specs: &[CategorySpec], concepts: &ConceptSet, seed: u64) -> Fixture {
    let categories: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
    Fixture {
        train: Dataset {
            categories: categories.clone(),
            samples: generate(specs, TRAIN_PER_CATEGORY, Split::Train, seed).unwrap(),
        },
        test: Dataset {
            categories,
            samples: generate(specs, TEST_PER_CATEGORY, Split::Test, seed).unwrap(),
        },
        concepts: concepts.clone(),
        tok: Tokenizer::build(&text_corpus(concepts).unwrap()),
    }
}

fn model_config(seed: u64) -> MiniClipConfig {
    MiniClipConfig {
        seed,
        ..MiniClipConfig::default()
    }
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    model: MiniClip,
    log: Vec<StepRecord>,
}

fn fit(fx: &Fixture, deal: &DealConfig, seed: u64, label: &str) -> Run {
    let start = Instant::now();
    let mut model = MiniClip::new(model_config(seed)).unwrap();
    let log = train(&fx.train, &fx.concepts, &mut model, &fx.tok, deal, &train_config(seed), |_| {}).unwrap();
    eprintln!("  trained {label} (seed {seed}) in {:.0} s", start.elapsed().as_secs_f64());
    Run { model, log }
}

fn report(fx: &Fixture, run: &Run) -> MetricReport {
    evaluate(
        &run.model,
        &fx.tok,
        &fx.test,
        &fx.concepts,
        Backend::default(),
        MetricSelection::all(),
        DEFAULT_THRESHOLD,
        eval_threads(),
    )
    .unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn epoch_means(log: &[StepRecord], field: fn(&StepRecord) -> f64) -> Vec<f64> {
    let epochs = log.iter().map(|r| r.epoch).max().map_or(0, |e| e + 1);
    (0..epochs)
        .map(|e| mean(&log.iter().filter(|r| r.epoch == e).map(field).collect::<Vec<_>>()))
        .collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- criterion 1 ----------------------------------------------------------

fn micro() -> MiniClipConfig {
    MiniClipConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        projection_dim: 4,
        vocab_size: 16,
        max_text_len: 8,
        seed: 11,
        ..MiniClipConfig::default()
    }
}

fn heatmap_loss(model: &MiniClip, param: &str, w: &Tensor) -> deal_tensor::Result<Tensor> {
    let mut b = model.bind(true);
    b.replace(param, w.clone()).unwrap();
    let cfg = model.config();
    let image = Tensor::seeded(&[cfg.channels, cfg.image_size, cfg.image_size], Init::Uniform { low: 0.0, high: 1.0 }, 4);
    let text = Tensor::seeded(&[cfg.projection_dim], Init::Normal { std: 1.0 }, 8);
    let text = text.scale(1.0 / text.data().iter().map(|x| x * x).sum::<f64>().sqrt());
    let h = Explainer::new(&b, &image, Backend::GradcamToken).unwrap().heatmap(&text, true).unwrap();
    let h = normalize(&h, Normalization::Sum).unwrap().grid;
    let c = Tensor::seeded(h.shape(), Init::Uniform { low: -1.0, high: 1.0 }, 77);
    h.mul(&c)?.sum_all().square()
}

fn autodiff_soundness() -> Outcome {
    let probes = catalog::primitives();
    let mut first: f64 = 0.0;
    for p in &probes {
        for seed in 0..10u64 {
            first = first.max(grad_check(&p.f, &p.point(50 + seed), Order::First).unwrap());
        }
    }
    let mut second: f64 = 0.0;
    for p in probes.iter().filter(|p| p.smooth) {
        second = second.max(grad_check(&p.f, &p.point(7), Order::Second).unwrap());
    }
    let model = MiniClip::new(micro()).unwrap();
    let mut heatmap: f64 = 0.0;
    for param in ["vision.block0.attn.v.w", "vision.proj", "vision.block0.mlp.fc1.w"] {
        let p = &model.params()[param];
        let point = Tensor::new(p.data.clone(), &p.shape).unwrap();
        heatmap = heatmap.max(grad_check(|w| heatmap_loss(&model, param, w), &point, Order::Second).unwrap());
    }
    outcome(
        first <= 1e-4 && second <= 1e-3 && heatmap <= 1e-3,
        format!(
            "first-order worst {first:.2e} over {} primitives x 10 points (<= 1e-4); second-order worst {second:.2e}, through gradcam-token {heatmap:.2e} (<= 1e-3)",
            probes.len()
        ),
    )
}

// ---- criterion 2 ----------------------------------------------------------

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn closed_form_examples() -> Vec<(&'static str, bool)> {
    let mut c: Vec<(&'static str, bool)> = Vec::new();
    let strings = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    c.push(("identity matmul", Tensor::eye(2).matmul(&a).unwrap().data() == a.data()));
    c.push(("softmax of equal logits", t(&[0.0, 0.0], &[2]).softmax(0).unwrap().data() == [0.5, 0.5]));
    c.push(("relu", t(&[-1.0, 0.0, 2.0], &[3]).relu().data() == [0.0, 0.0, 2.0]));
    let x = t(&[1.0, 2.0, 3.0], &[3]).with_grad();
    let g = backward(&x.mul(&x).unwrap().sum_all(), &[&x], false).unwrap();
    c.push(("gradient of sum of squares", g[0].data() == [2.0, 4.0, 6.0]));
    let x = Tensor::scalar(2.0).with_grad();
    let dy = backward(&x.powf(3.0).unwrap(), &[&x], true).unwrap().remove(0);
    let d2 = backward(&dy, &[&x], false).unwrap().remove(0);
    c.push(("second derivative of cube", close(d2.item().unwrap(), 12.0, TOL)));
    let sq = grad_check(|x: &Tensor| x.square(), &Tensor::scalar(3.0), Order::First).unwrap();
    c.push(("gradcheck of square", sq <= 1e-6));
    c.push((
        "seeded init is deterministic",
        Tensor::seeded(&[5], Init::Normal { std: 1.0 }, 3).data() == Tensor::seeded(&[5], Init::Normal { std: 1.0 }, 3).data(),
    ));
    c.push(("zero-scale normal init", Tensor::seeded(&[7], Init::Normal { std: 0.0 }, 3).data().iter().all(|&v| v == 0.0)));

    let tok = Tokenizer::build(&["an image of cat"]);
    c.push(("tokenize known words", tok.tokenize("an image of cat") == [1, 4, 5, 6, 7, 2]));
    c.push(("tokenize unknown word", tok.tokenize("an image of dog") == [1, 4, 5, 6, 3, 2]));
    c.push(("cosine identity", close(similarity(&t(&[0.6, 0.8], &[2]), &t(&[0.6, 0.8], &[2])).unwrap().item().unwrap(), 1.0, TOL)));
    c.push((
        "cosine antipodal",
        close(similarity(&t(&[0.6, 0.8], &[2]), &t(&[-0.6, -0.8], &[2])).unwrap().item().unwrap(), -1.0, TOL),
    ));
    c.push(("cosine orthogonal", similarity(&t(&[1.0, 0.0], &[2]), &t(&[0.0, 1.0], &[2])).unwrap().item().unwrap() == 0.0));

    c.push((
        "caption with two concepts",
        build_caption("lion", &strings(&["golden mane", "tufted tail"])).unwrap() == "An image of lion with golden mane, and tufted tail",
    ));
    c.push(("caption with one concept", build_caption("cat", &strings(&["whiskers"])).unwrap() == "An image of cat with whiskers"));
    c.push((
        "caption with three concepts",
        build_caption("zebra", &strings(&["stripes", "mane", "tail"])).unwrap() == "An image of zebra with stripes, mane, and tail",
    ));
    c.push(("empty prompt category rejected", build_llm_prompt("").is_err()));

    let grid = |v: [f64; 4]| Heatmap::from_values(v.to_vec(), 2, Backend::GradcamToken).unwrap();
    let h = normalize(&grid([1.0, 3.0, 3.0, 5.0]), Normalization::MinMax).unwrap();
    c.push(("min-max normalization", h.values() == [0.0, 0.5, 0.5, 1.0]));
    let h = normalize(&grid([1.0; 4]), Normalization::Sum).unwrap();
    c.push(("sum normalization", h.values().iter().all(|&v| close(v, 0.25, TOL))));
    let h = normalize(&grid([2.0; 4]), Normalization::MinMax).unwrap();
    c.push(("constant map is degenerate", h.degenerate && h.values() == [0.0; 4]));
    c.push(("constant graymap is black", to_pgm(&grid([0.3; 4])).ends_with("0 0\n0 0\n")));
    let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 4, 4).unwrap();
    c.push(("nearest upsampling", up == [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]));
    c.push(("binarize", binarize(&[0.0, 0.4, 0.6, 1.0], 0.5) == [0, 0, 1, 1]));
    c.push(("binarize all-zero", binarize(&[0.0; 4], 0.5) == [0; 4]));

    let one = Tensor::scalar(1.0);
    c.push(("infonce of one pair", infonce(&t(&[0.6, 0.8], &[1, 2]), &t(&[0.0, 1.0], &[1, 2]), &one, false).unwrap().item().unwrap() == 0.0));
    let v = t(&[0.6, 0.8].repeat(5), &[5, 2]);
    let u = t(&[1.0, 0.0].repeat(5), &[5, 2]);
    let l = infonce(&v, &u, &Tensor::scalar(0.07), false).unwrap().item().unwrap();
    c.push(("infonce of identical rows", close(l, 5f64.ln(), TOL)));
    let e = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let l = infonce(&e, &e, &one, false).unwrap().item().unwrap();
    c.push(("infonce hand value", close(l, (1.0 + (-1f64).exp()).ln(), TOL) && close(l, 0.31326, 1e-5)));

    let h1 = t(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
    let h2 = t(&[0.0, 1.0, 0.0, 0.0], &[2, 2]);
    let item = |r: deal_core::Result<Tensor>| r.unwrap().item().unwrap();
    c.push(("disentanglement of one map", item(r_disen(&[&h1], DistMetric::L1)) == 0.0));
    c.push(("disentanglement of identical maps", close(item(r_disen(&[&h1, &h1, &h1], DistMetric::L1)), 0.0, TOL)));
    c.push(("disentanglement hand value", close(item(r_disen(&[&h1, &h2], DistMetric::L1)), -4.0, TOL)));
    c.push(("localization of matching maps", close(item(r_local(&[&h1, &h1], &h1, DistMetric::L1)), 0.0, TOL)));
    let half = t(&[0.5, 0.5, 0.0, 0.0], &[2, 2]);
    c.push(("localization of matching mean", close(item(r_local(&[&h1, &h2], &half, DistMetric::L1)), 0.0, TOL)));
    c.push(("localization hand value", close(item(r_local(&[&h1, &h2], &h1, DistMetric::L1)), 1.0, TOL)));

    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let param = |v: f64| {
        std::collections::BTreeMap::from([(
            "w".to_string(),
            deal_core::model::Param {
                shape: vec![1],
                data: vec![v],
            },
        )])
    };
    let grads = |v: f64| std::collections::BTreeMap::from([("w".to_string(), vec![v])]);
    let mut p = param(1.0);
    adam_update(&mut p, &grads(1.0), &mut AdamState::default(), &cfg, 1).unwrap();
    c.push(("first adam step", close(p["w"].data[0] - 1.0, -cfg.learning_rate, TOL)));
    let mut p = param(0.7);
    adam_update(&mut p, &grads(0.0), &mut AdamState::default(), &cfg, 1).unwrap();
    c.push(("adam with zero gradient", p["w"].data[0] == 0.7));
    let decay = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let mut p = param(0.7);
    adam_update(&mut p, &grads(0.0), &mut AdamState::default(), &decay, 1).unwrap();
    c.push(("decoupled weight decay", close(p["w"].data[0], 0.7 * (1.0 - decay.learning_rate * 0.1), TOL)));

    c.push(("disentanglability of identical maps", disentanglability_of_maps(&[vec![0.2, 0.8], vec![0.2, 0.8]]) == 0.0));
    c.push((
        "disentanglability hand value",
        close(disentanglability_of_maps(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]), 0.5, TOL),
    ));
    c.push(("constant insertion curve", iauc_from_scores(&[0.3; 5]) == 0.5));
    c.push(("two-point insertion curve", close(iauc_from_scores(&[0.0, 1.0]), 0.5, TOL)));
    c.push(("early-saturating insertion curve", close(iauc_from_scores(&[0.0, 1.0, 1.0, 1.0, 1.0]), 0.875, TOL)));
    c.push(("prediction with one category", predict_from_similarities(&[vec![0.1]]).unwrap().0 == 0));
    c.push(("prediction by mean similarity", predict_from_similarities(&[vec![0.2, 0.4], vec![0.5, 0.3]]).unwrap().0 == 1));
    c.push(("iou of equal sets", iou(&[1, 1, 0, 0], &[1, 1, 0, 0]) == 1.0));
    c.push(("iou of disjoint sets", iou(&[1, 0, 0, 0], &[0, 1, 0, 0]) == 0.0));
    c.push(("iou hand value", close(iou(&[1, 1, 0, 0], &[0, 1, 0, 1]), 1.0 / 3.0, TOL)));

    let (specs, concepts) = default_taxonomy();
    c.push(("taxonomy size", specs.len() == 8 && concepts.categories.iter().all(|e| e.concepts.len() == 4)));
    let a = generate(&specs, 10, Split::Train, 1).unwrap();
    c.push(("generation is balanced", a.len() == 80 && (0..8).all(|k| a.iter().filter(|s| s.category_index == k).count() == 10)));
    c.push(("generation is deterministic", a == generate(&specs, 10, Split::Train, 1).unwrap()));
    c
}

fn equation_oracles(deal_log: &[StepRecord]) -> Outcome {
    let mut checks = closed_form_examples();
    let disen = epoch_means(deal_log, |r| r.disen);
    let total = epoch_means(deal_log, |r| r.total);
    let (d0, d1) = (disen[0], *disen.last().unwrap());
    let (t0, t1) = (total[0], *total.last().unwrap());
    checks.push(("final-epoch disentanglement term below first epoch", d1 < d0));
    checks.push(("final-epoch total loss below first epoch", t1 < t0));
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let mut detail = format!(
        "{} of {} examples hold; training curve disen {d0:.4} -> {d1:.4}, total {t0:.4} -> {t1:.4}",
        checks.len() - failed.len(),
        checks.len()
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join(", ")));
    }
    outcome(failed.is_empty(), detail)
}

// ---- criterion 3 ----------------------------------------------------------

fn plain_contrastive(fx: &Fixture, seed: u64) -> (Vec<f64>, MiniClip) {
    let cfg = train_config(seed);
    let mut model = MiniClip::new(model_config(seed)).unwrap();
    let mut state = AdamState::default();
    let images: Vec<Tensor> = fx.train.samples.iter().map(|s| s.image_tensor()).collect();
    let captions: Vec<Vec<usize>> = fx.train.samples.iter().map(|s| fx.tok.tokenize(&s.caption)).collect();
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(images.len(), cfg.batch_size, cfg.seed, epoch) {
            step += 1;
            let grads = {
                let b = model.bind(true);
                let imgs: Vec<Tensor> = batch.iter().map(|&i| images[i].clone()).collect();
                let caps: Vec<Vec<usize>> = batch.iter().map(|&i| captions[i].clone()).collect();
                let (v, t) = b.forward_batch(&imgs, &caps).unwrap();
                let loss = infonce(&v, &t, &b.log_temperature().exp().unwrap(), false).unwrap();
                losses.push(loss.item().unwrap());
                let named: Vec<(&str, &Tensor)> = b.named().collect();
                let wrt: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
                let g = backward(&loss, &wrt, false).unwrap();
                named.iter().zip(g).map(|((n, _), g)| (n.to_string(), g.to_vec())).collect()
            };
            adam_update(model.params_mut(), &grads, &mut state, &cfg, step).unwrap();
            model.clamp_temperature();
        }
    }
    (losses, model)
}

fn reduction_identity(fx: &Fixture, baseline: &Run) -> Outcome {
    let (losses, plain) = plain_contrastive(fx, 0);
    let logged: Vec<f64> = baseline.log.iter().map(|r| r.total).collect();
    let same_log = logged.iter().map(|v| v.to_bits()).eq(losses.iter().map(|v| v.to_bits()));
    let zero_terms = baseline.log.iter().all(|r| r.disen == 0.0 && r.local == 0.0 && r.contr == r.total);
    let same_model = plain == baseline.model;
    outcome(
        same_log && zero_terms && same_model,
        format!(
            "{} steps; losses bit-identical: {same_log}; regularizer columns zero: {zero_terms}; parameters bit-identical: {same_model}",
            losses.len()
        ),
    )
}

// ---- criterion 8 ----------------------------------------------------------

/// Share of each patch covered by the mask.
fn mask_heatmap(mask: &[u8], grid: usize) -> Vec<f64> {
    let p = IMAGE_SIZE / grid;
    let mut out = vec![0.0; grid * grid];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            out[(y / p) * grid + x / p] += f64::from(mask[y * IMAGE_SIZE + x]);
        }
    }
    out.iter_mut().for_each(|v| *v /= (p * p) as f64);
    out
}

fn metric_sanity(fx: &Fixture, run: &Run) -> Outcome {
    let bound = run.model.bind(false);
    let cfg = bound.config();
    let g = cfg.grid();
    let bank = ConceptBank::new(&bound, &fx.tok, &fx.concepts).unwrap();
    let (mut masked, mut random) = (Vec::new(), Vec::new());
    for (n, s) in fx.test.samples.iter().step_by(6).enumerate() {
        let label = fx.concepts.index_of(&fx.test.categories[s.category_index]).unwrap();
        let image = s.image_tensor();
        let canvas = blurred_canvas(image.data(), cfg.channels, cfg.image_size, cfg.image_size);
        for (k, (mask, text)) in s.masks.iter().zip(bank.category(label)).enumerate() {
            masked.push(iauc_for_heatmap(&bound, &image, &canvas, &mask_heatmap(mask, g), text).unwrap());
            for r in 0..RANDOM_MAPS {
                let seed = 9000 + (n * 1000 + k * 100 + r) as u64;
                let noise = Tensor::seeded(&[g * g], Init::Uniform { low: 0.0, high: 1.0 }, seed);
                random.push(iauc_for_heatmap(&bound, &image, &canvas, noise.data(), text).unwrap());
            }
        }
    }
    let (m, r) = (mean(&masked), mean(&random));
    outcome(
        m > r && masked.len() >= 50,
        format!("mask iAUC {m:.4} vs random {r:.4} over {} pairs x {RANDOM_MAPS} random maps", masked.len()),
    )
}

// ---- criterion 9 ----------------------------------------------------------

const TINY: &str = r#"
[data]
train_per_category = 4
test_per_category = 2

[model]
patch_size = 8
embed_dim = 16
num_layers_vision = 1
num_layers_text = 1
num_heads = 2
projection_dim = 8

[train]
batch_size = 8
epochs = 2
learning_rate = 0.001
"#;

fn deal_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_deal"))
        .args(args)
        .env("DEAL_THREADS", "1")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    // Both passes use the same paths, so even the resolved config must match.
    let base = root.path().join("work");
    let p = |rel: &str| base.join(rel).to_string_lossy().into_owned();
    let mut trees = Vec::new();
    for pass in ["first", "second"] {
        if base.exists() {
            fs::remove_dir_all(&base).unwrap();
        }
        fs::create_dir(&base).unwrap();
        let ran = deal_cli(&["--config", cfg, "datagen", "--out", &p("data")])
            && deal_cli(&["--config", cfg, "train", "--data", &p("data"), "--out", &p("run")])
            && deal_cli(&["--config", cfg, "eval", "--data", &p("data"), "--checkpoint", &p("run/checkpoint"), "--out", &p("eval")]);
        if !ran {
            return outcome(false, format!("a command failed on the {pass} pass"));
        }
        trees.push(["data", "run", "eval"].map(|d| tree(&base.join(d))));
    }
    let mut differing = Vec::new();
    let mut files = 0;
    for (a, b) in trees[0].iter().zip(&trees[1]) {
        files += a.len();
        let names_a: Vec<&String> = a.iter().map(|(n, _)| n).collect();
        let names_b: Vec<&String> = b.iter().map(|(n, _)| n).collect();
        if names_a != names_b {
            differing.push("file set".to_string());
            continue;
        }
        for ((n, x), (_, y)) in a.iter().zip(b) {
            if x != y {
                differing.push(n.clone());
            }
        }
    }
    outcome(
        differing.is_empty(),
        format!("datagen, train, eval rerun: {files} files compared, differing: [{}]", differing.join(", ")),
    )
}

// ---- driver ---------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    })
}

struct Line {
    id: usize,
    name: &'static str,
    directional: bool,
    outcome: Outcome,
    secs: f64,
}

fn print_line(l: &Line) {
    let verdict = if l.outcome.pass { "PASS" } else { "FAIL" };
    let kind = if l.directional { " [directional]" } else { "" };
    println!("criterion {} {}{kind}: {verdict} ({}; {:.1} s)", l.id, l.name, l.outcome.detail, l.secs);
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut lines: Vec<Line> = Vec::new();
    let mut record = |id, name, directional, secs, outcome| {
        let l = Line {
            id,
            name,
            directional,
            outcome,
            secs,
        };
        print_line(&l);
        lines.push(l);
    };

    let t = Instant::now();
    let c1 = guarded(autodiff_soundness);
    record(1, "autodiff soundness", false, t.elapsed().as_secs_f64(), c1);

    let (specs, concepts) = default_taxonomy();
    let fixtures: Vec<Fixture> = SEEDS.iter().map(|&s| fixture(&specs, &concepts, s)).collect();
    let full = DealConfig::default();
    let baseline = DealConfig::baseline();

    eprintln!("training baseline and full objective on {} seeds", SEEDS.len());
    let t = Instant::now();
    let mut base_runs = Vec::new();
    let mut deal_runs = Vec::new();
    for (fx, &seed) in fixtures.iter().zip(&SEEDS) {
        base_runs.push(fit(fx, &baseline, seed, "baseline"));
        deal_runs.push(fit(fx, &full, seed, "full"));
    }
    let training_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let c2 = guarded(|| equation_oracles(&deal_runs[0].log));
    record(2, "equation unit oracles", false, t.elapsed().as_secs_f64(), c2);

    let t = Instant::now();
    let c3 = guarded(|| reduction_identity(&fixtures[0], &base_runs[0]));
    record(3, "reduction identity", false, t.elapsed().as_secs_f64(), c3);

    let t = Instant::now();
    let base_reports: Vec<MetricReport> = fixtures.iter().zip(&base_runs).map(|(fx, r)| report(fx, r)).collect();
    let deal_reports: Vec<MetricReport> = fixtures.iter().zip(&deal_runs).map(|(fx, r)| report(fx, r)).collect();
    let eval_secs = t.elapsed().as_secs_f64();
    let avg = |rs: &[MetricReport], f: fn(&MetricReport) -> Option<f64>| mean(&rs.iter().map(|r| f(r).unwrap()).collect::<Vec<_>>());

    let (bd, dd) = (avg(&base_reports, |r| r.disentanglability), avg(&deal_reports, |r| r.disentanglability));
    record(
        4,
        "disentanglability gain",
        true,
        training_secs + eval_secs,
        outcome(
            dd - bd >= MARGIN,
            format!("full {dd:.4} vs baseline {bd:.4}, gain {:+.4} (needs >= {MARGIN})", dd - bd),
        ),
    );
    let (bm, dm) = (avg(&base_reports, |r| r.miou), avg(&deal_reports, |r| r.miou));
    record(
        5,
        "concept mIoU gain",
        true,
        0.0,
        outcome(
            dm - bm >= MARGIN,
            format!("full {dm:.4} vs baseline {bm:.4}, gain {:+.4} (needs >= {MARGIN})", dm - bm),
        ),
    );

    let t = Instant::now();
    let c6 = guarded(|| {
        let fx = &fixtures[0];
        let no_local = report(fx, &fit(fx, &DealConfig { gamma: 0.0, ..full.clone() }, 0, "without-local"));
        let no_disen = report(fx, &fit(fx, &DealConfig { lambda: 0.0, ..full.clone() }, 0, "without-disen"));
        let d = &deal_reports[0];
        let get = |r: &MetricReport| (r.disentanglability.unwrap(), r.localizability.unwrap(), r.miou.unwrap());
        let (fd, fl, fm) = get(d);
        let (ld, ll, lm) = get(&no_local);
        let (nd, nl, nm) = get(&no_disen);
        let a = ld >= fd && lm <= fm && ll <= fl;
        let b = nd <= fd;
        outcome(
            a && b,
            format!(
                "full disen/local/mIoU {fd:.4}/{fl:.4}/{fm:.4}; without-local {ld:.4}/{ll:.4}/{lm:.4} (a: {a}); without-disen {nd:.4}/{nl:.4}/{nm:.4} (b: {b})"
            ),
        )
    });
    record(6, "ablation pattern", true, t.elapsed().as_secs_f64(), c6);

    let t = Instant::now();
    let c7 = guarded(|| {
        let target = specs[0].name.clone();
        let spurious = inject_spurious(&specs, &target, 0.95, 0.0).unwrap();
        let (mut base_acc, mut deal_acc) = (Vec::new(), Vec::new());
        for &seed in &SEEDS {
            let fx = fixture(&spurious, &concepts, seed);
            for (deal, out, label) in [(&baseline, &mut base_acc, "watermarked baseline"), (&full, &mut deal_acc, "watermarked full")] {
                let run = fit(&fx, deal, seed, label);
                out.push(accuracy(&run.model, &fx.tok, &fx.test, &fx.concepts).unwrap());
            }
        }
        let (b, d) = (mean(&base_acc), mean(&deal_acc));
        outcome(
            d >= b,
            format!("watermark on {target}: full test accuracy {d:.4} vs baseline {b:.4} over {} seeds", SEEDS.len()),
        )
    });
    record(7, "spurious-correlation accuracy", true, t.elapsed().as_secs_f64(), c7);

    let t = Instant::now();
    let c8 = guarded(|| metric_sanity(&fixtures[0], &deal_runs[0]));
    record(8, "insertion metric sanity", false, t.elapsed().as_secs_f64(), c8);

    let t = Instant::now();
    let c9 = guarded(reproducibility);
    record(9, "reproducibility", false, t.elapsed().as_secs_f64(), c9);

    let total = started.elapsed().as_secs_f64();
    let hard_failures = lines.iter().filter(|l| !l.directional && !l.outcome.pass).count();
    let soft_failures = lines.iter().filter(|l| l.directional && !l.outcome.pass).count();
    println!(
        "acceptance: {} of {} criteria pass in {:.0} s (budget 2700 s)",
        lines.len() - hard_failures - soft_failures,
        lines.len(),
        total
    );
    let strict = std::env::var("DEAL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if hard_failures > 0 || (strict && soft_failures > 0) || total > 2700.0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
