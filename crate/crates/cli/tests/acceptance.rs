//! Acceptance run: prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if any fails.

use std::process::{Command, ExitCode};
use std::time::Instant;

use mcnn_core::corpus::{Corpus, LabelMap, OutputNormalizer, Split};
use mcnn_core::eval::{evaluate_all, report};
use mcnn_core::experiment::{evaluate_label_copy, evaluate_network, standard_variants};
use mcnn_core::knn::{retrieve_knn, Embedding, KnnIndex};
use mcnn_core::model::{check_gradients, cross_feature_map, loss, loss_gradient, McnnConfig, MatchOutput};
use mcnn_core::pipeline::{parse, NetworkMatcher, ParseContext, ParseOptions};
use mcnn_core::synth::SynthSpec;
use mcnn_core::tensor::{ConvLayer, Tensor};
use mcnn_core::train::{evaluate_pairs, prepare, train, Checkpoint, PairTensors, TrainConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let r = check_gradients(&McnnConfig::reduced(), 3, 200, 1e-4, 0).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        r.max_rel_error < 1e-4 && r.checked >= 200 && secs < 60.0,
        format!("max rel err {:.2e} over {} params ({} kink probes skipped), {secs:.1}s", r.max_rel_error, r.checked, r.skipped),
    )
}

/// Direct-loop convolution of one input tensor, no bias.
fn naive_conv(x: &Tensor<f64>, w: &[f64], out_maps: usize, k: usize, stride: usize, pad: usize) -> Vec<Vec<Vec<f64>>> {
    let (c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; out_maps];
    for (m, plane) in out.iter_mut().enumerate() {
        for (oy, row) in plane.iter_mut().enumerate() {
            for (ox, v) in row.iter_mut().enumerate() {
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            *v += w[((m * c + ci) * k + ky) * k + kx] * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn c2_cross_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p, q) = (rng.random_range(1..4), rng.random_range(1..4));
        let t = rng.random_range(0..3);
        let m = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..3);
        let size = rng.random_range(k.max(3)..10);
        let xi = Tensor::<f64>::uniform(&[p, size, size], 1.0, &mut rng);
        let xr = Tensor::<f64>::uniform(&[q, size, size], 1.0, &mut rng);
        let xc = Tensor::<f64>::uniform(&[t.max(1), size, size], 1.0, &mut rng);
        let cross = (t > 0).then_some(&xc);
        let mut filters = ConvLayer::<f64>::init_uniform(m, p + q + t, k, stride, pad, &mut rng);
        filters.bias = Tensor::uniform(&[m], 0.5, &mut rng);
        let got = cross_feature_map(&xi, &xr, cross, &filters).map_err(|e| e.to_string())?;
        // Slice the stacked filters into f^I, f^R, f^C and convolve each part separately.
        let w = filters.weights.data();
        let kk = k * k;
        let part = |start: usize, count: usize| -> Vec<f64> {
            (0..m).flat_map(|mo| w[(mo * (p + q + t) + start) * kk..(mo * (p + q + t) + start + count) * kk].to_vec()).collect()
        };
        let ci = naive_conv(&xi, &part(0, p), m, k, stride, pad);
        let cr = naive_conv(&xr, &part(p, q), m, k, stride, pad);
        let cc = (t > 0).then(|| naive_conv(&xc, &part(p + q, t), m, k, stride, pad));
        let (oh, ow) = (ci[0].len(), ci[0][0].len());
        if got.dims() != [m, oh, ow] {
            return Err(format!("shape {:?} vs oracle {:?}", got.dims(), [m, oh, ow]));
        }
        for mo in 0..m {
            for y in 0..oh {
                for x in 0..ow {
                    let pre = filters.bias.data()[mo] + ci[mo][y][x] + cr[mo][y][x] + cc.as_ref().map_or(0.0, |c| c[mo][y][x]);
                    worst = worst.max((got.data()[(mo * oh + y) * ow + x] - pre.max(0.0)).abs());
                }
            }
        }
    }
    check(worst <= 1e-10, format!("max deviation {worst:.2e} over 100 configurations"))
}

fn c3_loss_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let out = |rng: &mut ChaCha8Rng| {
        MatchOutput::new(rng.random_range(-1.0..2.0), std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
    };
    let n = 40;
    let preds: Vec<MatchOutput<f64>> = (0..n).map(|_| out(&mut rng)).collect();
    let targets: Vec<MatchOutput<f64>> = (0..n).map(|_| out(&mut rng)).collect();
    let presence: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let base = loss(&preds, &targets, &presence);
    let mut trials = 0;
    for trial in 0..200 {
        let mut perturbed = preds.clone();
        for (p, &present) in perturbed.iter_mut().zip(&presence) {
            if !present {
                p.displacements = std::array::from_fn(|_| rng.random_range(-1e3..1e3) * (trial as f64 + 1.0));
            }
        }
        if loss(&perturbed, &targets, &presence).to_bits() != base.to_bits() {
            return Err(format!("J changed on trial {trial}"));
        }
        for ((p, t), &present) in perturbed.iter().zip(&targets).zip(&presence) {
            let (_, g) = loss_gradient(p, t, present, n);
            if !present && g[1..].iter().any(|&v| v != 0.0) {
                return Err(format!("nonzero displacement gradient {:?} on an absent pair", &g[1..]));
            }
        }
        trials += 1;
    }
    check(true, format!("J bit-identical and dJ/dt exactly 0 over {trials} perturbations"))
}

/// Synthetic 64/16/16 corpus and the desk network trained on it.
struct Trained {
    corpus: Corpus,
    tc: TrainConfig,
    checkpoint: Checkpoint,
    epochs: u32,
}

fn train_desk() -> Result<Trained, String> {
    let corpus = SynthSpec::default().with_counts(64, 16, 16).generate().map_err(|e| e.to_string())?;
    let tc = TrainConfig::desk();
    let data = prepare(&corpus, &tc).map_err(|e| e.to_string())?;
    let out = train(&data, &tc, &McnnConfig::desk(), None, &TrainOptions::default(), |r| {
        eprintln!("  epoch {:>2}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss)
    })
    .map_err(|e| e.to_string())?;
    let epochs = out.checkpoint.state.epoch;
    Ok(Trained { corpus, tc, checkpoint: out.checkpoint, epochs })
}

fn c4_overfit(t: &Trained, secs: f64) -> Outcome {
    let data = prepare(&t.corpus, &t.tc).map_err(|e| e.to_string())?;
    let ck = &t.checkpoint;
    let (h, w) = (ck.config().input_height, ck.config().input_width);
    let tensors = PairTensors::new(&data.train_pairs, &ck.normalizer, h, w);
    let m = evaluate_pairs(&ck.params, &ck.normalizer, &data.train_pairs, &tensors).map_err(|e| e.to_string())?;
    check(
        m.confidence_accuracy >= 0.95 && m.displacement_mae <= 0.05 && t.epochs <= 30,
        format!(
            "train-pair confidence accuracy {:.4}, displacement MAE {:.4} after {} epochs ({secs:.0}s)",
            m.confidence_accuracy, m.displacement_mae, t.epochs
        ),
    )
}

struct EndToEnd {
    k9: f64,
    k9_unsmoothed: f64,
    k1: f64,
    copy: f64,
}

fn end_to_end(t: &Trained) -> Result<EndToEnd, String> {
    let ck = &t.checkpoint;
    let ctx = ParseContext::from_corpus(&t.corpus, ck.extractor, Some(&ck.params)).map_err(|e| e.to_string())?;
    let opts = ParseOptions::desk();
    let run = |o: &ParseOptions| evaluate_network(&t.corpus, Split::Test, &ctx, &ck.params, ck.normalizer, o);
    let k9 = run(&opts).map_err(|e| e.to_string())?;
    let k1 = run(&ParseOptions { k: 1, ..opts.clone() }).map_err(|e| e.to_string())?;
    let copy = evaluate_label_copy(&t.corpus, Split::Test, &ctx).map_err(|e| e.to_string())?;
    Ok(EndToEnd { k9: k9.smoothed.avg_f1, k9_unsmoothed: k9.unsmoothed.avg_f1, k1: k1.smoothed.avg_f1, copy: copy.avg_f1 })
}

fn c8_ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (corpus, out) = (dir.path().join("corpus"), dir.path().join("ablation"));
    let bin = env!("CARGO_BIN_EXE_mcnn");
    let small = ["--set", "synth.train=16", "--set", "synth.val=4", "--set", "synth.test=4"];
    let st = Command::new(bin).args(small).args(["gen-data", "--out"]).arg(&corpus).output().map_err(|e| e.to_string())?;
    if !st.status.success() {
        return Err(String::from_utf8_lossy(&st.stderr).into_owned());
    }
    let quick = ["--set", "train.max_epochs=2", "--set", "train.k_train=2", "--set", "train.augment=false"];
    let st = Command::new(bin)
        .args(quick)
        .arg("ablate")
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !st.status.success() {
        return Err(format!("ablate failed: {}", String::from_utf8_lossy(&st.stderr)));
    }
    let table = std::fs::read_to_string(out.join("ablation.txt")).map_err(|e| e.to_string())?;
    eprint!("{table}");
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let names: Vec<String> = standard_variants(&McnnConfig::desk()).into_iter().map(|v| v.name).collect();
    let got: Vec<&str> = rows.as_array().into_iter().flatten().filter_map(|r| r["name"].as_str()).collect();
    let finite = rows.as_array().into_iter().flatten().all(|r| r["metrics"]["avg_f1"].as_f64().is_some_and(f64::is_finite));
    check(
        got == names && finite && names.iter().all(|n| table.contains(n.as_str())),
        format!("{} variants trained and evaluated: {}", got.len(), got.join(", ")),
    )
}

fn random_map(rng: &mut ChaCha8Rng, labels: u8) -> LabelMap {
    LabelMap::from_data(8, 8, (0..64).map(|_| rng.random_range(0..=labels)).collect()).expect("8x8 map")
}

fn c9_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l = 4usize;
    let names: Vec<String> = (1..=l).map(|i| format!("l{i}")).collect();
    let preds: Vec<LabelMap> = (0..10).map(|_| random_map(&mut rng, l as u8)).collect();
    let truths: Vec<LabelMap> = (0..10).map(|_| random_map(&mut rng, l as u8)).collect();
    let pairs: Vec<(&LabelMap, &LabelMap)> = preds.iter().zip(&truths).collect();
    let got = report(&evaluate_all(&pairs, l).map_err(|e| e.to_string())?, &names).map_err(|e| e.to_string())?;
    let pixels: Vec<(u8, u8)> =
        preds.iter().zip(&truths).flat_map(|(p, t)| p.data().iter().copied().zip(t.data().iter().copied())).collect();
    let count = |f: &dyn Fn(u8, u8) -> bool| pixels.iter().filter(|&&(p, t)| f(p, t)).count() as u64;
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0usize);
    for lab in 1..=l as u8 {
        let tp = count(&|p, t| p == lab && t == lab);
        let fp = count(&|p, t| p == lab && t != lab);
        let fne = count(&|p, t| t == lab && p != lab);
        let (pr, re) = (div(tp, tp + fp), div(tp, tp + fne));
        let f1 = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
        let m = &got.per_label[lab as usize - 1];
        if (m.precision, m.recall, m.f1, m.support) != (pr, re, f1, tp + fne) {
            return Err(format!("label {lab}: {m:?} vs brute ({pr}, {re}, {f1}, {})", tp + fne));
        }
        if tp + fne > 0 {
            (sp, sr, sf, n) = (sp + pr, sr + re, sf + f1, n + 1);
        }
    }
    let acc = div(count(&|p, t| p == t), pixels.len() as u64);
    let fg = div(count(&|p, t| p == t && t != 0), count(&|_, t| t != 0));
    let want = (acc, fg, sp / n as f64, sr / n as f64, sf / n as f64);
    let have = (got.accuracy, got.fg_accuracy, got.avg_precision, got.avg_recall, got.avg_f1);
    check(have == want, format!("evalkit {have:?} vs brute force {want:?}"))
}

fn c10_retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..100 {
        let n = rng.random_range(9..60);
        let dim = rng.random_range(1..20);
        let entries: Vec<Embedding> = (0..n)
            .map(|i| Embedding { id: (i * 7 + trial) as u32, vector: (0..dim).map(|_| rng.random_range(-1.0..1.0f32)).collect() })
            .collect();
        let index = KnnIndex::new(entries.clone()).map_err(|e| e.to_string())?;
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let mut all: Vec<(f64, u32)> = entries
            .iter()
            .map(|e| (e.vector.iter().zip(&q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>(), e.id))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in [1, 5, 9] {
            let want: Vec<u32> = all.iter().take(k).map(|x| x.1).collect();
            let got = retrieve_knn(&index, &q, k, None).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("index {trial}, K={k}: {got:?} vs {want:?}"));
            }
        }
    }
    check(true, "100 indices x K in {1, 5, 9} agree with the full sort".into())
}

fn c11_persistence(t: &Trained) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.mcnn"), dir.path().join("b.mcnn"));
    t.checkpoint.save(&a).map_err(|e| e.to_string())?;
    let loaded = mcnn_core::train::load_checkpoint(&a).map_err(|e| e.to_string())?;
    loaded.save(&b).map_err(|e| e.to_string())?;
    let same_bytes = std::fs::read(&a).map_err(|e| e.to_string())? == std::fs::read(&b).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let parse_all = |ck: &Checkpoint| -> Result<Vec<LabelMap>, String> {
        pool.install(|| {
            let ctx = ParseContext::from_corpus(&t.corpus, ck.extractor, Some(&ck.params)).map_err(|e| e.to_string())?;
            let matcher = NetworkMatcher { params: &ck.params, normalizer: ck.normalizer };
            t.corpus
                .split(Split::Test)
                .iter()
                .map(|e| {
                    parse(&e.image, &ctx, &matcher, &ParseOptions::desk(), None, Some(&ck.params))
                        .map(|(r, _)| r.label_map)
                        .map_err(|e| e.to_string())
                })
                .collect()
        })
    };
    let before = parse_all(&t.checkpoint)?;
    let after = parse_all(&loaded)?;
    check(
        same_bytes && before == after,
        format!("save/load/save byte-identical: {same_bytes}; {} parses bit-identical: {}", before.len(), before == after),
    )
}

fn c12_normalizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = OutputNormalizer {
            mean: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            variance: std::array::from_fn(|_| rng.random_range(1e-4..4.0)),
        };
        let v = MatchOutput::new(rng.random_range(-3.0..3.0), std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
        for back in [n.normalize(&n.denormalize(&v)), n.denormalize(&n.normalize(&v))] {
            for (a, b) in back.to_array().iter().zip(v.to_array()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:.2e} over 1000 vectors"))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("C1 gradient fidelity", c1_gradient_fidelity()));
    results.push(("C2 cross-map oracle", c2_cross_oracle()));
    results.push(("C3 loss masking", c3_loss_masking()));
    let t = Instant::now();
    let trained = train_desk();
    let secs = t.elapsed().as_secs_f64();
    match &trained {
        Ok(tr) => {
            results.push(("C4 overfit sanity", c4_overfit(tr, secs)));
            match end_to_end(tr) {
                Ok(e) => {
                    results.push((
                        "C5 end-to-end trend",
                        check(e.k9 >= 0.60 && e.k9 > e.copy, format!("avg F1 {:.4} vs label copy {:.4}", e.k9, e.copy)),
                    ));
                    results.push(("C6 K sensitivity", check(e.k9 >= e.k1, format!("avg F1 K=9 {:.4} vs K=1 {:.4}", e.k9, e.k1))));
                    results.push((
                        "C7 smoothing trend",
                        check(e.k9 >= e.k9_unsmoothed, format!("avg F1 with {:.4} vs without {:.4}", e.k9, e.k9_unsmoothed)),
                    ));
                }
                Err(err) => {
                    for name in ["C5 end-to-end trend", "C6 K sensitivity", "C7 smoothing trend"] {
                        results.push((name, Err(err.clone())));
                    }
                }
            }
        }
        Err(err) => {
            for name in ["C4 overfit sanity", "C5 end-to-end trend", "C6 K sensitivity", "C7 smoothing trend"] {
                results.push((name, Err(err.clone())));
            }
        }
    }
    results.push(("C8 ablation machinery", c8_ablation()));
    results.push(("C9 metrics oracle", c9_metrics_oracle()));
    results.push(("C10 retrieval oracle", c10_retrieval_oracle()));
    results.push((
        "C11 persistence",
        match &trained {
            Ok(tr) => c11_persistence(tr),
            Err(e) => Err(e.clone()),
        },
    ));
    results.push(("C12 normalizer", c12_normalizer()));
    results.sort_by_key(|(name, _)| name[1..].split(' ').next().and_then(|n| n.parse::<u32>().ok()));
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("[PASS] {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {name}: {d}")
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
