mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use common::{dice_oracle, lesion_oracle, random_mask, rng, surface_oracle};
use nerd::backbone::{build_backbone, param_count, BackboneConfig, Preset};
use nerd::cli::commands::{cmd_evaluate, cmd_train, EvalSource, TrainRunOptions, CHECKPOINT_DIR};
use nerd::cli::ExperimentConfig;
use nerd::coords::{normalized_field, position_field};
use nerd::data::{generate_border_bias, Image, SliceSample, Split, SynthConfig};
use nerd::diagnostics::{control_score, feature_stats, shift_score};
use nerd::heads::{baseline_logits, calibrate_c, calibrate_m, nerdc_logits, nerdm_logits, Head, HeadConfig, HeadKind, LogitMap};
use nerd::metrics::{connected_components, dice, lesion_counts, lesion_metrics, surface_distances, Connectivity};
use nerd::nn::Parameterized;
use nerd::train::{lr_at, pooled_dice, train_model, TrainConfig, TrainOptions, BEST_CHECKPOINT};
use nerd::{Error, Mask, ModelConfig, SegModel, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bitwise_equal(a: &LogitMap, b: &LogitMap) -> bool {
    a.values.len() == b.values.len() && a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn head_reduction() -> Result<String, String> {
    let mut r = rng(2024);
    for case in 0..50 {
        let (b, h, w, c) = (r.random_range(1..=3), r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=8));
        let x = Tensor::from_vec([b, h, w, c], (0..b * h * w * c).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let seed = r.random();
        let head = |kind| Head::new(HeadConfig::new(kind), c, &mut rng(seed)).unwrap();
        let (base, m, cc) = (head(HeadKind::Baseline), head(HeadKind::Nerdm), head(HeadKind::Nerdc));
        let field = normalized_field(h, w).map_err(|e| e.to_string())?;
        let w0 = base.classifier().unwrap();
        let reference = baseline_logits(&x, w0).unwrap();
        let via_m = nerdm_logits(&x, &calibrate_m(m.calibrator().unwrap(), &field).unwrap(), m.classifier().unwrap()).unwrap();
        let via_c = nerdc_logits(&x, &calibrate_c(cc.calibrator().unwrap(), &field).unwrap()).unwrap();
        ensure(bitwise_equal(&reference, &via_m), || format!("map {case}: nerdm differs from baseline"))?;
        ensure(bitwise_equal(&reference, &via_c), || format!("map {case}: nerdc differs from baseline"))?;
        for model in [&m, &cc] {
            let got = model.forward(x.clone()).unwrap().0;
            ensure(bitwise_equal(&reference, &got), || format!("map {case}: {} head forward differs", model.kind()))?;
        }
    }
    Ok("50 maps bitwise equal".into())
}

fn gradient_fidelity() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let configs = [
        HeadConfig::new(HeadKind::Nerdm),
        HeadConfig { constrain_scale: true, ..HeadConfig::new(HeadKind::Nerdm) },
        HeadConfig::new(HeadKind::Nerdc),
    ];
    for config in configs {
        for size in [4, 8, 16] {
            let err = common::head_gradient_error(config.clone(), size, size, 3, size as u64);
            ensure(err <= 1e-3, || format!("{} calibrator {size}x{size}: {err:.3e}", config.kind))?;
            worst = worst.max(err);
        }
    }
    for seed in [3, 8] {
        let err = common::backbone_gradient_error(16, seed);
        ensure(err <= 1e-3, || format!("tiny backbone 16x16 seed {seed}: {err:.3e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max relative error {worst:.2e}"))
}

fn metric_oracles() -> Result<String, String> {
    let mut r = rng(31337);
    let conns = [Connectivity::Four, Connectivity::Eight, Connectivity::Six, Connectivity::TwentySix];
    let mut worst: f64 = 0.0;
    let mut defined = 0;
    for case in 0..200 {
        let dims = [r.random_range(1..=3), r.random_range(1..=10), r.random_range(1..=10)];
        let spacing = [r.random_range(0.2..4.0), r.random_range(0.2..4.0), r.random_range(0.2..4.0)];
        let (da, db) = (r.random_range(0.05..0.6), r.random_range(0.05..0.6));
        let pred = random_mask(&mut r, dims, da);
        let gt = random_mask(&mut r, dims, db);
        let d = dice(&pred, &gt).map_err(|e| e.to_string())?;
        ensure(d == dice_oracle(&pred, &gt), || format!("case {case}: dice {d} vs {}", dice_oracle(&pred, &gt)))?;
        for conn in conns {
            let c = lesion_counts(&connected_components(&pred, conn), &connected_components(&gt, conn)).unwrap();
            let o = lesion_oracle(&pred, &gt, conn);
            ensure((c.gl, c.pl, c.tp_gt, c.tp_pred) == (o.gl, o.pl, o.tp_gt, o.tp_pred), || {
                format!("case {case} {conn:?}: counts {c:?} vs oracle {o:?}")
            })?;
            let m = lesion_metrics(c, 2);
            let ltpr = (o.gl > 0).then(|| o.tp_gt as f64 / o.gl as f64);
            let lfpr = (o.pl > 0).then(|| 1.0 - o.tp_pred as f64 / o.pl as f64);
            ensure(m.ltpr == ltpr && m.lfpr == lfpr, || format!("case {case} {conn:?}: lesion rates"))?;
        }
        match (surface_distances(&pred, &gt, spacing), surface_oracle(&pred, &gt, spacing)) {
            (Ok(s), Some(o)) => {
                let err = (s.hd() - o.hd).abs().max((s.hd95() - o.hd95).abs()).max((s.asd() - o.asd).abs());
                ensure(err <= 1e-9, || format!("case {case}: surface distance error {err:e} mm"))?;
                worst = worst.max(err);
                defined += 1;
            }
            (Err(Error::UndefinedBoundary(_)), None) => {}
            (got, o) => return Err(format!("case {case}: library {:?} vs oracle defined {}", got.map(|s| s.hd()), o.is_some())),
        }
    }
    Ok(format!("200 pairs, {defined} with surfaces, max distance error {worst:.1e} mm"))
}

fn lr_schedule() -> Result<String, String> {
    let config = TrainConfig { epochs: 90, ..TrainConfig::default() };
    let expected = [(0, 1e-3), (44, 1e-3), (45, 5e-4), (62, 5e-4), (63, 2.5e-4), (80, 2.5e-4), (81, 1.25e-4), (89, 1.25e-4)];
    for (epoch, lr) in expected {
        let got = lr_at(epoch, &config).map_err(|e| e.to_string())?;
        ensure(got == lr, || format!("epoch {epoch}: {got} != {lr}"))?;
    }
    Ok("1e-3, 5e-4, 2.5e-4, 1.25e-4 at 0, 45, 63, 81".into())
}

fn position_identities() -> Result<String, String> {
    for h in 1..=64 {
        for w in 1..=64 {
            let f = position_field(h, w).map_err(|e| e.to_string())?;
            for i in 0..h {
                for j in 0..w {
                    let [t, r, b, l] = f.at(i, j);
                    let ok = t + b == (h - 1) as f64 && l + r == (w - 1) as f64 && t == i as f64 && l == j as f64;
                    ensure(ok, || format!("{h}x{w} at ({i}, {j}): {:?}", [t, r, b, l]))?;
                }
            }
        }
    }
    Ok("all sizes 1..=64 x 1..=64".into())
}

fn border_bias_experiment() -> Result<String, String> {
    let synth = SynthConfig::default();
    let ds = generate_border_bias(&synth).map_err(|e| e.to_string())?;
    let split = |s: Split| ds.split(s).map(|x| x.sample.clone()).collect::<Vec<_>>();
    let (train, val, test) = (split(Split::Train), split(Split::Val), split(Split::Test));
    ensure((train.len(), val.len(), test.len(), synth.height, synth.width) == (200, 40, 40, 64, 64), || "dataset shape".into())?;
    let mut means = BTreeMap::new();
    for kind in [HeadKind::Baseline, HeadKind::Nerdc] {
        let mut scores = Vec::new();
        for seed in 0..3 {
            let config = ModelConfig::new(BackboneConfig::with_filters(vec![8, 16, 32, 64, 128], 1), kind);
            let model = SegModel::new(config, seed).map_err(|e| e.to_string())?;
            let train_config = TrainConfig { epochs: 15, seed, ..TrainConfig::default() };
            let (best, _) = train_model(model, &train, &val, &train_config, &TrainOptions::default()).map_err(|e| e.to_string())?;
            scores.push(100.0 * pooled_dice(&best, &test, 14, 0.5).map_err(|e| e.to_string())?);
        }
        let mean = scores.iter().sum::<f64>() / 3.0;
        println!("    {kind}: test dice {:.2} {:.2} {:.2}, mean {mean:.2}", scores[0], scores[1], scores[2]);
        means.insert(kind.as_str(), mean);
    }
    let margin = means["nerdc"] - means["baseline"];
    let detail = format!("nerdc {:.2} vs baseline {:.2}, margin {margin:.2} points", means["nerdc"], means["baseline"]);
    ensure(margin >= 5.0, || detail.clone())?;
    Ok(detail)
}

fn parameter_overhead() -> Result<String, String> {
    let backbone = param_count(&build_backbone(BackboneConfig::preset(Preset::Low, 1), 0).unwrap());
    let low = |kind| SegModel::new(ModelConfig::new(BackboneConfig::preset(Preset::Low, 1), kind), 0).unwrap();
    let high = SegModel::new(ModelConfig::new(BackboneConfig::preset(Preset::High, 1), HeadKind::Baseline), 0).unwrap();
    let mut parts = Vec::new();
    for kind in [HeadKind::Nerdm, HeadKind::Nerdc] {
        let extra = low(kind).head().calibrator_param_count();
        let share = 100.0 * extra as f64 / backbone as f64;
        ensure(share < 3.0, || format!("{kind} calibrator is {share:.2}% of the backbone"))?;
        parts.push(format!("{kind} calibrator {share:.2}%"));
    }
    let (nerdc, base_high) = (low(HeadKind::Nerdc).param_count(), high.param_count());
    ensure(nerdc < base_high, || format!("low nerdc {nerdc} >= high baseline {base_high}"))?;
    parts.push(format!("low nerdc {nerdc} < high baseline {base_high}"));
    Ok(parts.join(", "))
}

const PIPELINE: &str = r#"
seeds = [0]
[dataset.synth]
height = 32
width = 32
band = 6
train = 24
val = 8
test = 8
seed = 5
[model]
filters = [4, 8, 16, 32, 64]
head = "nerdc"
[train]
epochs = 2
"#;

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline_once(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let config_path = root.join("experiment.toml");
    std::fs::write(&config_path, PIPELINE).map_err(|e| e.to_string())?;
    let config = ExperimentConfig::load(&config_path).map_err(|e| e.to_string())?;
    let out = root.join("run");
    let runs = cmd_train(&config, &out, &TrainRunOptions::default()).map_err(|e| e.to_string())?;
    ensure(runs.len() == 1 && runs[0].history.records.len() == 2, || "training did not finish two epochs".into())?;
    let checkpoint = runs[0].dir.join(CHECKPOINT_DIR).join(BEST_CHECKPOINT);
    for k in 0..2 {
        let source = EvalSource::Checkpoint(&checkpoint);
        let dataset = out.join("dataset");
        cmd_evaluate(source, &dataset, Split::Test, &config.evaluation.conventions(), 0.5, &out.join(format!("eval_{k}")))
            .map_err(|e| e.to_string())?;
    }
    Ok(csv_files(&out))
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).and_then(|_| std::fs::create_dir_all(&b)).map_err(|e| e.to_string())?;
    let first = pipeline_once(&a)?;
    let second = pipeline_once(&b)?;
    ensure(first.len() >= 4, || format!("only {} csv files written", first.len()))?;
    ensure(first.keys().eq(second.keys()), || "runs wrote different csv files".into())?;
    for (name, bytes) in &first {
        ensure(&second[name] == bytes, || format!("{} differs between runs", name.display()))?;
    }
    for (name, bytes) in &first {
        if let Some(rest) = name.to_str().and_then(|s| s.strip_prefix("eval_0/")) {
            let twin = Path::new("eval_1").join(rest);
            ensure(first.get(&twin) == Some(bytes), || format!("{rest} differs between evaluations"))?;
        }
    }
    Ok(format!("{} csv files byte-identical across two runs", first.len()))
}

fn white_noise(n: usize, size: usize, seed: u64) -> Vec<SliceSample> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| SliceSample {
            image: Image { height: size, width: size, channels: 1, values: (0..size * size).map(|_| r.random()).collect() },
            label: Mask::zeros([1, size, size]),
            volume_id: format!("noise_{k}"),
            slice_index: 0,
        })
        .collect()
}

fn shift_diagnostic() -> Result<String, String> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let model =
            SegModel::new(ModelConfig::new(BackboneConfig::preset(Preset::Low, 1), HeadKind::Baseline), seed).map_err(|e| e.to_string())?;
        let stats = feature_stats(&model, &white_noise(24, 64, 100 + seed), 8).map_err(|e| e.to_string())?;
        let (shift, control) = (shift_score(&stats, 4).unwrap(), control_score(&stats, 4).unwrap());
        wins += usize::from(shift > control);
        parts.push(format!("{shift:.3}/{control:.3}"));
    }
    let detail = format!("shift/control {} ({wins} of 3)", parts.join(", "));
    ensure(wins >= 2, || detail.clone())?;
    Ok(detail)
}

fn main() -> ExitCode {
    let checks: [(u32, &str, Duration, Check); 9] = [
        (1, "head reduction equivalence", Duration::from_secs(10), head_reduction),
        (2, "gradient fidelity", Duration::from_secs(120), gradient_fidelity),
        (3, "metric oracle equivalence", Duration::from_secs(120), metric_oracles),
        (4, "lr schedule", Duration::from_secs(1), lr_schedule),
        (5, "position field identities", Duration::from_secs(5), position_identities),
        (6, "border-bias experiment", Duration::from_secs(15 * 60), border_bias_experiment),
        (7, "parameter overhead", Duration::from_secs(5), parameter_overhead),
        (8, "pipeline determinism", Duration::from_secs(5 * 60), determinism),
        (9, "shift diagnostic", Duration::from_secs(60), shift_diagnostic),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, limit, check) in checks {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str()) || *f == id.to_string()) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s limit", limit.as_secs())),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!("[{}] {id}. {name}: {detail} ({:.1}s)", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
