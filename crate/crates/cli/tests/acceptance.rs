//! Acceptance suite. Prints one `PASS` or `FAIL` line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::ThreadPoolBuilder;

use starvqa::attention::{attention_weights, token_row};
use starvqa::checkpoint::{log_path, Checkpoint};
use starvqa::dataset::{load_all, Manifest, Video};
use starvqa::encoder::{forward_tokens, qkv_project, space_attention, time_attention, EncoderConfig, ModelParams};
use starvqa::eval::{plcc, srocc};
use starvqa::preprocess::PatchArray;
use starvqa::quality::{encode_mos, expectation, predict, predict_vector, vr_loss, QualityVector};
use starvqa::synthetic::{overfit_config, SyntheticSpec};
use starvqa::tape::{Eval, Graph};
use starvqa::tensor::Tensor;
use starvqa::train::{fit, TrainState};
use starvqa::{Error, Scalar};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["starvqa"];
    full.extend_from_slice(args);
    let code = starvqa_cli::run(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn pool(threads: usize) -> rayon::ThreadPool {
    ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Tiny model whose every tensor is the init plus uniform noise.
fn noisy_params(cfg: EncoderConfig, rng: &mut ChaCha8Rng, spread: f64) -> ModelParams<f64> {
    let mut params = ModelParams::<f64>::init(cfg, rng).unwrap();
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        for v in params.store.get_mut(id).data_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    params
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, spread: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-spread..spread)).collect()).unwrap()
}

/// A random small architecture with at least `min_patches` patches per frame
/// and `min_frames` frames. Patch side 1, so the grid is the crop itself.
/// Widths below 3 are excluded: layernorm maps every 1-wide token to its bias
/// and every order-preserving change of a 2-wide token to the same output.
fn small_config(rng: &mut ChaCha8Rng, min_patches: usize, min_frames: usize) -> EncoderConfig {
    loop {
        let heads = rng.random_range(1..=3);
        let cfg = EncoderConfig {
            frames: rng.random_range(min_frames..=4),
            height: rng.random_range(1..=3),
            width: rng.random_range(1..=3),
            patch: 1,
            dim: heads * rng.random_range(1..=3),
            heads,
            blocks: 1,
            mlp_hidden: 4,
            head_hidden: 3,
        };
        if cfg.dim >= 3 && cfg.patches_per_frame() >= min_patches && cfg.validate().is_ok() {
            return cfg;
        }
    }
}

fn gradient_oracle() -> Check {
    let tiny = EncoderConfig::tiny();
    ensure(
        (tiny.frames, tiny.height, tiny.width, tiny.patch, tiny.dim, tiny.heads, tiny.blocks) == (2, 8, 8, 4, 8, 2, 2),
        || format!("unexpected tiny config {tiny:?}"),
    )?;
    let started = Instant::now();
    let (code, out, err) = pool(1).install(|| cli(&["gradcheck"]));
    let elapsed = started.elapsed();
    ensure(code == 0, || format!("exit {code}: {err}{out}"))?;
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for line in out.lines().skip(1) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() == 4 {
            let rel: f64 = f[2].parse().map_err(|_| format!("bad line `{line}`"))?;
            ensure(rel < 1e-4, || format!("{} relative error {rel:e}", f[0]))?;
            worst = worst.max(rel);
            tensors += 1;
        }
    }
    ensure(tensors == 44, || format!("{tensors} tensors reported"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {}", secs(elapsed)))?;
    Ok(format!("{tensors} tensors, max relative error {worst:.2e} < 1e-4, {} on one thread", secs(elapsed)))
}

/// Which rows must stay bit-identical, and which must move, after
/// perturbing token `(p', t')`.
fn locality_trial(rng: &mut ChaCha8Rng, temporal: bool) -> std::result::Result<bool, String> {
    let cfg = if temporal { small_config(rng, 2, 1) } else { small_config(rng, 1, 2) };
    let (s, f) = (cfg.patches_per_frame(), cfg.frames);
    let params = noisy_params(cfg, rng, 0.5);
    let tokens = random_tensor(rng, vec![cfg.tokens(), cfg.dim], 2.0);
    let (p, t) = (rng.random_range(0..s), rng.random_range(0..f));
    let (pp, tp) = if temporal {
        let mut pp = rng.random_range(0..s - 1);
        if pp >= p {
            pp += 1;
        }
        (pp, rng.random_range(0..f))
    } else {
        let mut tp = rng.random_range(0..f - 1);
        if tp >= t {
            tp += 1;
        }
        (rng.random_range(0..s), tp)
    };
    let mut perturbed = tokens.clone();
    for v in perturbed.row_mut(token_row(pp, tp, s)) {
        *v += rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    }
    let pass = |x: &Tensor<f64>| {
        let mut ev = Eval::new();
        let var = ev.constant(x.clone());
        let block = &params.blocks[0];
        if temporal {
            time_attention(&mut ev, &params, &var, block).unwrap()
        } else {
            space_attention(&mut ev, &params, &var, block).unwrap()
        }
    };
    let (a, b) = (pass(&tokens), pass(&perturbed));
    let bits = |row: &[f64]| row.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let guarded: Vec<usize> = if temporal {
        (0..f).map(|tau| token_row(p, tau, s)).collect()
    } else {
        (0..s).map(|pi| token_row(pi, t, s)).collect()
    };
    for r in guarded {
        ensure(bits(a.row(r)) == bits(b.row(r)), || {
            format!("row {r} moved after perturbing ({pp},{tp}) in {cfg:?}")
        })?;
    }
    let dependents: Vec<usize> = if temporal {
        (0..f).filter(|&tau| tau != tp).map(|tau| token_row(pp, tau, s)).collect()
    } else {
        (0..s).filter(|&pi| pi != pp).map(|pi| token_row(pi, tp, s)).collect()
    };
    if dependents.is_empty() {
        return Ok(false);
    }
    for r in dependents {
        ensure(bits(a.row(r)) != bits(b.row(r)), || {
            format!("row {r} ignored a perturbation of ({pp},{tp}) it attends to")
        })?;
    }
    Ok(true)
}

fn attention_locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10ca1);
    let mut live = [0usize; 2];
    for (i, temporal) in [true, false].into_iter().enumerate() {
        for _ in 0..1000 {
            if locality_trial(&mut rng, temporal)? {
                live[i] += 1;
            }
        }
    }
    Ok(format!(
        "1000 trials per pass bit-identical in f64 (perturbation reached its own group in {}/{} time and {}/{} space trials)",
        live[0], 1000, live[1], 1000
    ))
}

fn normalization() -> Check {
    const DRAWS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5005);
    let mut worst_attn = 0.0f64;
    let mut rows_checked = 0usize;
    for _ in 0..DRAWS {
        let cfg = small_config(&mut rng, 1, 1);
        let mut params = noisy_params(cfg, &mut rng, 0.5);
        let boost = rng.random_range(1.0..30.0);
        let block = params.blocks[0].clone();
        for v in params.store.get_mut(block.time.query).data_mut() {
            *v *= boost;
        }
        let tokens = random_tensor(&mut rng, vec![cfg.tokens(), cfg.dim], 3.0);
        let mut ev = Eval::new();
        let var = ev.constant(tokens);
        for (attn, pattern) in [(&block.time, params.time_pattern()), (&block.space, params.space_pattern())] {
            let qkv = qkv_project(&mut ev, &params, &var, attn).unwrap();
            let w = attention_weights(&qkv.query, &qkv.key, pattern, cfg.heads).unwrap();
            for r in 0..pattern.rows() {
                if pattern.keys(r).is_empty() {
                    continue;
                }
                for h in 0..cfg.heads {
                    let row = w.row(pattern, r, h);
                    ensure(row.iter().all(|x| x.is_finite() && *x >= 0.0), || format!("bad weights {row:?}"))?;
                    worst_attn = worst_attn.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows_checked += 1;
                }
            }
        }
    }
    ensure(worst_attn <= 1e-6, || format!("attention row off by {worst_attn:e}"))?;

    let mut worst_enc = 0.0f64;
    for i in 0..DRAWS {
        let m = match i {
            0 => 0.0,
            1 => 5.0,
            _ => rng.random_range(0.0..=5.0),
        };
        let q64 = encode_mos(m).map_err(|e| e.to_string())?;
        let q32 = encode_mos(m as f32).map_err(|e| e.to_string())?;
        worst_enc = worst_enc.max((q64.sum() - 1.0f64).abs()).max((q32.sum() as f64 - 1.0).abs());
    }
    ensure(worst_enc <= 1e-6, || format!("encode_mos off by {worst_enc:e}"))?;

    let mut worst_pred = 0.0f64;
    let tiny = EncoderConfig::tiny();
    for _ in 0..DRAWS {
        let params = noisy_params(tiny, &mut rng, 0.5);
        let scale = rng.random_range(0.1..50.0);
        let label = random_tensor(&mut rng, vec![1, tiny.dim], scale);
        let mut ev = Eval::new();
        let var = ev.constant(label.clone());
        let y64 = predict_vector(&mut ev, &params, &var).unwrap();
        let p32: ModelParams<f32> = params.cast();
        let mut ev32 = Eval::new();
        let var32 = ev32.constant(label.cast());
        let y32 = predict_vector(&mut ev32, &p32, &var32).unwrap();
        ensure(y64.data().iter().all(|x| x.is_finite() && *x >= 0.0), || format!("bad output {y64:?}"))?;
        ensure(y32.data().iter().all(|x| x.is_finite() && *x >= 0.0), || format!("bad output {y32:?}"))?;
        worst_pred = worst_pred
            .max((y64.data().iter().sum::<f64>() - 1.0).abs())
            .max((y32.data().iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
    }
    ensure(worst_pred <= 1e-6, || format!("predict_vector off by {worst_pred:e}"))?;

    let (mut lo, mut hi, mut self_worst) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for i in 0..DRAWS {
        let draw = |rng: &mut ChaCha8Rng| -> QualityVector<f64> {
            let mut v: Vec<f64> = match i % 3 {
                0 => (0..6).map(|_| rng.random_range(-8.0f64..8.0).exp()).collect(),
                1 => {
                    let mut v = vec![0.0; 6];
                    v[rng.random_range(0..6)] = 1.0;
                    v
                }
                _ => (0..6).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 }).collect(),
            };
            if v.iter().sum::<f64>() == 0.0 {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            QualityVector::from_slice(&v.iter().map(|x| x / s).collect::<Vec<_>>()).unwrap()
        };
        let (q, y) = (draw(&mut rng), draw(&mut rng));
        let l = vr_loss(&q, &y).map_err(|e| e.to_string())?;
        lo = lo.min(l);
        hi = hi.max(l);
        self_worst = self_worst.max(vr_loss(&q, &q).map_err(|e| e.to_string())?.abs());
    }
    ensure((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi), || format!("vr_loss range [{lo}, {hi}]"))?;
    ensure(self_worst <= 1e-12, || format!("vr_loss(q,q) = {self_worst:e}"))?;
    Ok(format!(
        "{DRAWS} draws each: {rows_checked} attention rows within {worst_attn:.1e}, encode_mos within {worst_enc:.1e}, \
         predict_vector within {worst_pred:.1e}; vr_loss in [{lo:.3}, {hi:.3}], vr(q,q) <= {self_worst:.1e}"
    ))
}

fn roundtrip() -> Check {
    let mut worst = (0.0f64, 0.0f64);
    for i in 100..=400 {
        let m = i as f64 / 100.0;
        let err = (expectation(&encode_mos(m).map_err(|e| e.to_string())?) - m).abs();
        if err > worst.0 {
            worst = (err, m);
        }
    }
    ensure(worst.0 <= 0.05, || format!("error {} at m = {}", worst.0, worst.1))?;
    ensure((worst.0 - 0.021_093_375_1).abs() < 1e-9, || {
        format!("max error {} disagrees with the direct-evaluation sweep", worst.0)
    })?;
    Ok(format!("max |decode(encode(m)) - m| = {:.10} at m = {} (<= 0.05)", worst.0, worst.1))
}

fn synthetic_videos(dir: &Path, frames: usize) -> Vec<Video> {
    let manifest = SyntheticSpec::default().write(dir).unwrap();
    load_all(&Manifest::load(&manifest).unwrap(), frames).unwrap()
}

fn overfit() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let run = overfit_config();
    let videos = synthetic_videos(dir.path(), run.encoder.frames);
    let started = Instant::now();
    let (a, b) = pool(4).install(|| {
        let a = fit::<f32>(run.encoder, &run.train, &videos, |_| {});
        let b = fit::<f32>(run.encoder, &run.train, &videos, |_| {});
        (a, b)
    });
    let elapsed = started.elapsed();
    let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
    ensure(a.history == b.history && a == b, || "two seeded runs differ".into())?;
    let hit = a
        .history
        .iter()
        .find(|r| r.step <= 500 && r.srocc == Some(1.0) && r.loss < 0.01)
        .ok_or_else(|| {
            let last = a.history.last().unwrap();
            format!("not reached in 500 steps; last loss {} srocc {:?}", last.loss, last.srocc)
        })?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {}", secs(elapsed)))?;
    Ok(format!(
        "SROCC 1 and loss {:.4} < 0.01 at step {} (seed {}, lr {}, batch {}); two runs identical; {} for both on 4 threads",
        hit.loss,
        hit.step,
        run.train.seed,
        run.train.learning_rate,
        run.train.batch_size,
        secs(elapsed)
    ))
}

fn brute_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        cov += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
    }
    let (sx, sy) = ((vx / n).sqrt(), (vy / n).sqrt());
    (sx > 0.0 && sy > 0.0).then(|| cov / n / (sx * sy))
}

fn brute_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + below + (equal - 1.0) / 2.0
        })
        .collect()
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3e7);
    let (mut worst, mut tied, mut undefined) = (0.0f64, 0, 0);
    for i in 0..1000 {
        let n = rng.random_range(2..=12);
        let gen = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n)
                .map(|_| if i % 2 == 0 { rng.random_range(-10.0..10.0) } else { rng.random_range(0..4) as f64 })
                .collect()
        };
        let (x, y) = (gen(&mut rng), gen(&mut rng));
        let has_ties = |v: &[f64]| (0..v.len()).any(|a| (0..a).any(|b| v[a] == v[b]));
        if has_ties(&x) || has_ties(&y) {
            tied += 1;
        }
        let pairs = [
            (plcc(&x, &y), brute_pearson(&x, &y)),
            (srocc(&x, &y), brute_pearson(&brute_ranks(&x), &brute_ranks(&y))),
        ];
        for (got, want) in pairs {
            match (got, want) {
                (Ok(g), Some(w)) => worst = worst.max((g - w).abs()),
                (Err(Error::UndefinedMetric(_)), None) => undefined += 1,
                (g, w) => return Err(format!("x={x:?} y={y:?}: library {g:?}, brute force {w:?}")),
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "1000 instances ({tied} with ties, {undefined} undefined on both sides), max deviation {worst:.1e} <= 1e-12"
    ))
}

fn shape_scale() -> Check {
    let cfg = EncoderConfig::default();
    ensure(
        (cfg.frames, cfg.height, cfg.width, cfg.patch, cfg.dim, cfg.heads, cfg.blocks) == (8, 224, 224, 16, 768, 12, 12),
        || format!("unexpected default config {cfg:?}"),
    )?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ModelParams::<f32>::init(cfg, &mut rng).map_err(|e| e.to_string())?;
    let count = params.parameter_count();
    ensure(count == 115_738_374 && cfg.parameter_count() == count, || format!("{count} parameters"))?;
    let rows = cfg.frames * cfg.patches_per_frame();
    let pixels = (0..rows * cfg.patch_len()).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let patches = PatchArray::from_tensor(
        cfg.frames,
        cfg.grid(),
        cfg.patch,
        Tensor::new(vec![rows, cfg.patch_len()], pixels).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let mut ev = Eval::new();
    let tokens = forward_tokens(&mut ev, &params, &patches).map_err(|e| e.to_string())?;
    ensure(tokens.shape() == [1569, 768], || format!("sequence shape {:?}", tokens.shape()))?;
    ensure(tokens.data().iter().all(|v| v.is_finite()), || "non-finite token".into())?;
    let q = predict(&params, &patches).map_err(|e| e.to_string())?;
    ensure(q.as_slice().iter().all(|v| v.is_finite()), || format!("non-finite prediction {q:?}"))?;
    Ok(format!(
        "{} tokens x {}, {count} parameters, finite forward in {}",
        tokens.rows(),
        tokens.cols(),
        secs(started.elapsed())
    ))
}

fn roundtrip_state<T: Scalar>(dir: &Path, videos: &[Video], name: &str) -> std::result::Result<usize, String> {
    let mut run = overfit_config();
    run.train.epochs = 25;
    run.precision = T::PRECISION;
    let state: TrainState<T> = fit(run.encoder, &run.train, videos, |_| {}).map_err(|e| e.to_string())?;
    let path = dir.join(name);
    let ckpt = Checkpoint { run, state };
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::<T>::load(&path).map_err(|e| e.to_string())?;
    ensure(back == ckpt, || format!("{name}: reloaded state differs"))?;
    let mut compared = 0;
    for v in videos {
        let clip = v.center_clip::<T>(&ckpt.run.encoder).map_err(|e| e.to_string())?;
        let a = predict(&ckpt.state.params, &clip).map_err(|e| e.to_string())?;
        let b = predict(&back.state.params, &clip).map_err(|e| e.to_string())?;
        let bits = |q: &QualityVector<T>| q.as_slice().iter().map(|x| x.to_f64_lossy().to_bits()).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b), || format!("{name}: prediction for {} differs", v.id))?;
        compared += 1;
    }
    Ok(compared)
}

fn checkpoint_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let videos = synthetic_videos(dir.path(), EncoderConfig::tiny().frames);
    let n32 = roundtrip_state::<f32>(dir.path(), &videos, "a32.ckpt")?;
    let n64 = roundtrip_state::<f64>(dir.path(), &videos, "a64.ckpt")?;

    let (code, _, err) = cli(&["synth", "--out", dir.path().to_str().unwrap()]);
    ensure(code == 0, || err.clone())?;
    let cfg = dir.path().join("overfit.cfg");
    let mut logs = Vec::new();
    for name in ["run1.ckpt", "run2.ckpt"] {
        let out = dir.path().join(name);
        let (code, _, err) = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "epochs=60",
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure(code == 0, || format!("train exit {code}: {err}"))?;
        logs.push(fs::read(log_path(&out)).unwrap());
    }
    ensure(logs[0] == logs[1], || "loss logs differ".into())?;
    let lines = String::from_utf8_lossy(&logs[0]).lines().count();
    ensure(lines == 60, || format!("{lines} log lines"))?;
    Ok(format!(
        "save/load/forward bit-identical on {n32} clips (f32) and {n64} clips (f64); two seeded CLI runs wrote identical {lines}-line logs"
    ))
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("gradient-oracle", gradient_oracle),
        ("attention-locality", attention_locality),
        ("normalization", normalization),
        ("encode-decode-roundtrip", roundtrip),
        ("overfit", overfit),
        ("metric-oracles", metric_oracles),
        ("shape-scale", shape_scale),
        ("checkpoint-determinism", checkpoint_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", 8 - failed, 8);
    if failed > 0 {
        std::process::exit(1);
    }
}
