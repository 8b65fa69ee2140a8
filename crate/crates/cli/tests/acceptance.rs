//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the lines are always
//! printed. Exits non-zero if any criterion fails. Criteria 5 and 7 share
//! one trained base checkpoint.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kvdit::backbone::ConvInit;
use kvdit::bench::{bench_attention_grid, flops_attention, flops_attention_grid};
use kvdit::data::{Generator, SyntheticDataset};
use kvdit::diffusion::{train_step, NoiseSchedule, TrainState};
use kvdit::kvattn::{conv_avg_init, kv_compressed_attention, AttentionWeights, CompressionOp, CompressionSpec, TokenGrid};
use kvdit::numerics::ops::strided_group_conv2d;
use kvdit::{Dit, ModelConfig, Rng, Tensor};
use kvdit_cli::checkpoint::Checkpoint;
use kvdit_cli::commands;
use kvdit_cli::config::RawConfig;
use kvdit_cli::stats::CorpusStats;

const BIN: &str = env!("CARGO_BIN_EXE_kvdit");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn raw(pairs: &[(&str, &str)]) -> RawConfig {
    let mut r = RawConfig::default();
    for (k, v) in pairs {
        r.set(k, v).unwrap();
    }
    r
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Plain-loop multi-head attention without any compression.
fn naive_attention(x: &[f64], n: usize, c: usize, w: &AttentionWeights) -> Vec<f64> {
    let heads = w.heads;
    let dk = c / heads;
    let wq = w.qkv_proj.data();
    let proj = |col0: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..c {
                    s += x[t * c + i] * wq[i * 3 * c + col0 + j];
                }
                out[t * c + j] = s;
            }
        }
        out
    };
    let (q, k, v) = (proj(0), proj(c), proj(2 * c));
    let mut attn = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| (0..dk).map(|d| q[i * c + h * dk + d] * k[j * c + h * dk + d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter_mut().map(|s| {
                *s = (*s - mx).exp();
                *s
            }).sum();
            for d in 0..dk {
                attn[i * c + h * dk + d] = (0..n).map(|j| scores[j] / z * v[j * c + h * dk + d]).sum();
            }
        }
    }
    let wo = w.out_proj.data();
    let mut y = vec![0.0; n * c];
    for t in 0..n {
        for j in 0..c {
            y[t * c + j] = (0..c).map(|i| attn[t * c + i] * wo[i * c + j]).sum();
        }
    }
    y
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (1 + rng.below(8), 1 + rng.below(8));
        let heads = [1, 2, 4][rng.below(3)];
        let c = heads * (1 + rng.below(64 / heads));
        let x = TokenGrid::new(1, h, w, c, rng.normal_vec(h * w * c)).unwrap();
        for op in [CompressionOp::Discard, CompressionOp::Pool, CompressionOp::Conv] {
            let spec = CompressionSpec::new(op, 1, (1, 1));
            let wts = AttentionWeights::random(c, heads, &spec, &mut rng).unwrap();
            let got = kv_compressed_attention(&x, &spec, &wts).unwrap();
            worst = worst.max(max_abs_diff(got.data(), &naive_attention(x.data(), h * w, c, &wts)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-10 && secs < 10.0, format!("max |diff| {worst:.2e} (tol 1e-10) over 50 instances x 3 operators in {secs:.1}s (limit 10s)"))
}

fn criterion_2() -> Verdict {
    let mut rng = Rng::new(202);
    let mut worst_pool: f64 = 0.0;
    for r in [2, 3] {
        for _ in 0..20 {
            let (h, w, c) = (r * (1 + rng.below(4)), r * (1 + rng.below(4)), 1 + rng.below(16));
            let x = TokenGrid::new(2, h, w, c, rng.normal_vec(2 * h * w * c)).unwrap();
            let conv = conv_avg_init(r, c, &mut rng);
            let got = strided_group_conv2d(&x, &conv.kernel, &conv.bias, r).unwrap();
            let (ho, wo) = (h / r, w / r);
            let mut want = vec![0.0; 2 * ho * wo * c];
            for b in 0..2 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        for ch in 0..c {
                            let mut s = 0.0;
                            for dy in 0..r {
                                for dx in 0..r {
                                    s += x.data()[((b * h + oy * r + dy) * w + ox * r + dx) * c + ch];
                                }
                            }
                            want[((b * ho + oy) * wo + ox) * c + ch] = s / (r * r) as f64;
                        }
                    }
                }
            }
            worst_pool = worst_pool.max(max_abs_diff(got.data(), &want));
        }
    }

    // A freshly retrofitted model: compressed keys against LayerNorm(pool(K)).
    let cfg = ModelConfig::toy();
    let mut base = Dit::new(cfg.clone(), 2).unwrap();
    base.perturb(0.05, 3);
    let block = cfg.depth;
    let fitted = base.retrofit_compression(CompressionSpec::new(CompressionOp::Conv, 2, (block, block)), ConvInit::Avg, 0).unwrap();
    let (h, w) = cfg.image_size();
    let x = Tensor::randn(&[2, h, w, 3], 1.0, &mut rng);
    let (_, cache) = fitted.forward_with_cache(&x, &[17, 900], &[0, 5, 9, 13, 1, 6, 10, 14]).unwrap();
    let (c, (gh, gw)) = (cfg.channels, cfg.grid);
    let qkv = fitted.params().by_name(&format!("block{block}.attn.qkv")).unwrap().data();
    let mut worst_ln: f64 = 0.0;
    for b in 0..2 {
        let input = cache.attention_input(block, b);
        let got = cache.compressed_keys(block, b);
        for oy in 0..gh / 2 {
            for ox in 0..gw / 2 {
                let mut pooled = vec![0.0; c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let n = (2 * oy + dy) * gw + 2 * ox + dx;
                    for (j, p) in pooled.iter_mut().enumerate() {
                        *p += (0..c).map(|i| input[n * c + i] * qkv[i * 3 * c + c + j]).sum::<f64>() / 4.0;
                    }
                }
                let mean = pooled.iter().sum::<f64>() / c as f64;
                let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let m = oy * (gw / 2) + ox;
                for j in 0..c {
                    let want = (pooled[j] - mean) / (var + 1e-6).sqrt();
                    worst_ln = worst_ln.max((got[m * c + j] - want).abs());
                }
            }
        }
    }
    verdict(
        worst_pool <= 1e-12 && worst_ln <= 1e-10,
        format!("pre-norm conv vs mean pool {worst_pool:.2e} (tol 1e-12, R in {{2,3}}); retrofit keys vs LN(pool(K)) {worst_ln:.2e} (tol 1e-10)"),
    )
}

/// Multiply-add counter over the score and weighted-sum loops.
fn counted_flops(n: usize, m: usize, c: usize, heads: usize) -> u64 {
    let dk = c / heads;
    let mut flops = 0u64;
    for _h in 0..heads {
        for _i in 0..n {
            for _j in 0..m {
                for _d in 0..dk {
                    flops += 2;
                }
            }
            for _j in 0..m {
                for _d in 0..dk {
                    flops += 2;
                }
            }
        }
    }
    flops
}

fn criterion_3() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for (n, r) in [(1024, 2), (4096, 2), (63 * 63, 3)] {
        let dense = flops_attention(n, 64, 4, 1).unwrap().quadratic_terms();
        let cell = flops_attention(n, 64, 4, r).unwrap().quadratic_terms();
        let ok = dense == (r * r) as u64 * cell;
        pass &= ok;
        notes.push(format!("N={n} R={r}: {dense} = {}x{cell} {}", r * r, if ok { "ok" } else { "MISMATCH" }));
    }
    pass &= flops_attention(4096, 64, 4, 2).unwrap().terms.scores == 536_870_912;
    for r in [1, 2, 4] {
        let model = flops_attention_grid(8, 8, 16, 2, r, CompressionOp::Conv).unwrap();
        let counted = counted_flops(64, 64 / (r * r), 16, 2);
        pass &= model.quadratic_terms() == counted;
    }
    notes.push("64-token instrumented count matches for R in {1,2,4}".into());
    verdict(pass, notes.join("; "))
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    let med = |side: usize, r: usize| {
        let op = if r == 1 { CompressionOp::None } else { CompressionOp::Conv };
        bench_attention_grid((side, side), 64, 4, r, op, 5, 2, 256, 0).unwrap().median_ms
    };
    let speedup = |side: usize| {
        let (dense, comp) = (med(side, 1), med(side, 2));
        (1.0 - comp / dense, dense, comp)
    };
    let (s_small, d_small, c_small) = speedup(32);
    let (s_big, d_big, c_big) = speedup(128);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        s_big >= 0.20 && s_big > s_small && secs < 300.0,
        format!(
            "R=2 time reduction {:.1}% at N=16384 ({d_big:.1} -> {c_big:.1} ms) vs {:.1}% at N=1024 ({d_small:.2} -> {c_small:.2} ms); need >= 20% and growth; 1 thread, 5 repeats after 2 warmups, {secs:.0}s",
            100.0 * s_big,
            100.0 * s_small
        ),
    )
}

fn train_base(dir: &Path) -> PathBuf {
    let out = dir.join("base");
    commands::train(&raw(&[("output_dir", out.to_str().unwrap()), ("train.samples", "0")])).unwrap();
    out.join("final.kvdt")
}

fn finetune(dir: &Path, name: &str, base: &Path, pairs: &[(&str, &str)]) -> kvdit::w2s::ExperimentReport {
    let out = dir.join(name);
    let mut all = vec![("output_dir", out.to_str().unwrap()), ("experiment.from", base.to_str().unwrap())];
    all.extend_from_slice(pairs);
    commands::finetune(&raw(&all)).unwrap()
}

fn criterion_5(dir: &Path, base: &Path) -> Verdict {
    let start = Instant::now();
    // Curves are identical up to the compare step whatever the budget, so
    // the race stops there.
    let report = finetune(dir, "upscale", base, &[
        ("experiment.adapt", "upscale"),
        ("model.grid", "16x16"),
        ("experiment.budget", "100"),
        ("experiment.probe_steps", "0,100"),
    ]);
    let secs = start.elapsed().as_secs_f64();
    let per_seed: Vec<String> = report
        .outcomes
        .iter()
        .map(|o| {
            let a = o.arm("interpolate").and_then(|a| a.probe_at(100)).unwrap_or(f64::NAN);
            let b = o.arm("random").and_then(|a| a.probe_at(100)).unwrap_or(f64::NAN);
            format!("seed {} {a:.4} vs {b:.4}", o.seed)
        })
        .collect();
    let pairs = report.outcomes.len() as f64;
    verdict(
        report.seeds_passed() >= 2 && secs / pairs < 1200.0,
        format!("interpolate below random at step 100 in {}/3 seeds ({}); {:.0}s per seed pair", report.seeds_passed(), per_seed.join(", "), secs / pairs),
    )
}

fn criterion_6(dir: &Path, base: &Path) -> Verdict {
    let report = finetune(dir, "retrofit", base, &[
        ("experiment.adapt", "kvcompress"),
        ("compress.op", "conv"),
        ("compress.stride", "2"),
        ("experiment.budget", "0"),
    ]);
    let mut every = true;
    let mut margins = Vec::new();
    for o in &report.outcomes {
        let (a, r) = (&o.arm("avg").unwrap().divergence, &o.arm("random").unwrap().divergence);
        every &= !a.is_empty() && a.len() == r.len() && a.iter().zip(r).all(|(x, y)| x < y);
        margins.push(format!("seed {} avg max {:.2e} vs random min {:.2e}", o.seed, a.iter().cloned().fold(0.0, f64::max), r.iter().cloned().fold(f64::INFINITY, f64::min)));
    }
    let unit = finetune(dir, "retrofit_r1", base, &[
        ("experiment.adapt", "kvcompress"),
        ("compress.op", "conv"),
        ("compress.stride", "1"),
        ("experiment.budget", "0"),
    ]);
    let r1 = unit.outcomes.iter().flat_map(|o| o.arm("avg").unwrap().divergence.iter().copied()).fold(0.0, f64::max);
    verdict(
        every && report.outcomes.len() == 3 && r1 <= 1e-10,
        format!("avg-init below random on every probe batch of every seed: {every} ({}); R=1 divergence {r1:.1e}", margins.join(", ")),
    )
}

fn criterion_7(dir: &Path, base: &Path) -> Verdict {
    let report = finetune(dir, "codec", base, &[
        ("experiment.adapt", "codec"),
        ("experiment.codec_b", "perm:2,0,1"),
        ("experiment.budget", "600"),
    ]);
    let notes: Vec<&str> = report.outcomes.iter().map(|o| o.note.as_str()).collect();
    let identity = finetune(dir, "codec_identity", base, &[
        ("experiment.adapt", "codec"),
        ("experiment.codec_b", "identity"),
        ("experiment.budget", "0"),
        ("experiment.seeds", "1"),
    ]);
    let base_loss = identity.base_loss.unwrap();
    let step0 = identity.outcomes[0].arm("finetune").and_then(|a| a.probe_at(0)).unwrap();
    let rel = (step0 - base_loss) / base_loss;
    verdict(
        report.seeds_passed() >= 2 && rel.abs() <= 0.10,
        format!(
            "permutation swap: {}/3 seeds ({}); identity swap step-0 loss {step0:.5} vs base {base_loss:.5} ({:+.1}%, tol 10%)",
            report.seeds_passed(),
            notes.join("; "),
            100.0 * rel
        ),
    )
}

fn criterion_8(dir: &Path) -> Verdict {
    let res = commands::checkgrad(&raw(&[("output_dir", dir.join("checkgrad").to_str().unwrap())]));
    let (ok, detail) = match &res {
        Ok(v) => (v.len() == 3 && v.iter().all(|(_, e)| *e < 1e-4), v.iter().map(|(op, e)| format!("{op} {e:.2e}")).collect::<Vec<_>>().join(", ")),
        Err(e) => (false, e.to_string()),
    };
    let out = dir.join("checkgrad_fault");
    let fault = Command::new(BIN)
        .args(["checkgrad", "--fault", "mlp_weight_scale", "--set", "checkgrad.ops=conv", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    let code = fault.status.code();
    verdict(ok && code == Some(3), format!("max rel. error {detail} (tol 1e-4); corrupted backward exits {code:?}"))
}

fn criterion_9(dir: &Path) -> Verdict {
    let cfg = ModelConfig::toy();
    let (h, w) = cfg.image_size();
    let data = SyntheticDataset::new(Generator::GaussianBlobs, h, w, 3, 512, 0).unwrap();
    let sched = NoiseSchedule::default_linear();
    let mut zero = TrainState::new(Dit::new(cfg.clone(), 0).unwrap(), 0.0, 5);
    let (x, l) = data.batch(&data.step_indices(5, 0, 256)).unwrap();
    let init = train_step(&mut zero, &x, &l, &sched).unwrap();

    let mut fit = TrainState::new(Dit::new(cfg, 4).unwrap(), 1e-3, 4);
    let (x, l) = data.batch(&[7; 8]).unwrap();
    for _ in 0..200 {
        train_step(&mut fit, &x, &l, &sched).unwrap();
    }
    let hist = &fit.loss_history;
    let (first, last) = (hist[..10].iter().sum::<f64>() / 10.0, hist[190..].iter().sum::<f64>() / 10.0);

    let small = [("train.batch_size", "4"), ("train.samples", "0"), ("train.steps", "10"), ("train.checkpoint_every", "5")];
    let run = |name: &str, resume: Option<&Path>| {
        let out = dir.join(name);
        let mut pairs = small.to_vec();
        pairs.push(("output_dir", out.to_str().unwrap()));
        let resume_s = resume.map(|p| p.to_str().unwrap().to_string());
        if let Some(p) = &resume_s {
            pairs.push(("train.resume", p.as_str()));
        }
        commands::train(&raw(&pairs)).unwrap();
        std::fs::read(out.join("final.kvdt")).unwrap()
    };
    let full = run("resume_full", None);
    let resumed = run("resume_half", Some(&dir.join("resume_full/ckpt_000005.kvdt")));
    verdict(
        (0.95..=1.05).contains(&init) && last <= 0.5 * first && full == resumed,
        format!(
            "zero-output loss {init:.4} over 256 samples; overfit {first:.4} -> {last:.4} in 200 steps; resumed checkpoint bitwise equal: {}",
            full == resumed
        ),
    )
}

fn criterion_10(dir: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;

    let run = |name: &str| {
        let out = dir.join(name);
        commands::train(&raw(&[("output_dir", out.to_str().unwrap()), ("train.steps", "8"), ("train.batch_size", "4"), ("train.samples", "0")])).unwrap();
        out
    };
    let (a, b) = (run("repro_a"), run("repro_b"));
    let same_csv = std::fs::read(a.join("loss.csv")).unwrap() == std::fs::read(b.join("loss.csv")).unwrap();
    pass &= same_csv;
    notes.push(format!("loss CSVs byte-identical: {same_csv}"));

    let path = a.join("final.kvdt");
    let bytes = std::fs::read(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let state = ck.clone().into_state().unwrap();
    let resaved = Checkpoint::from_state(&state);
    let bitwise = resaved.to_bytes() == bytes
        && ck.tensors.iter().zip(&resaved.tensors).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    pass &= bitwise;
    notes.push(format!("checkpoint round trip bitwise: {bitwise}"));

    // Synthetic corpus from a known Zipf-like vocabulary, recounted by a
    // separate sort-based tally.
    let vocab: Vec<String> = (0..200).map(|i| if i % 7 == 0 { format!("Word{i}") } else { format!("word{i}") }).collect();
    let mut rng = Rng::new(1010);
    let mut corpus = String::new();
    for _ in 0..500 {
        let len = rng.below(400);
        let words: Vec<&str> = (0..len).map(|_| vocab[(rng.uniform().powi(3) * 200.0) as usize].as_str()).collect();
        corpus.push_str(&words.join(" "));
        corpus.push('\n');
    }
    let stats = CorpusStats::from_text(&corpus);
    let mut all: Vec<String> = Vec::new();
    let mut captions = 0usize;
    let mut hist = vec![0usize; 13];
    for line in corpus.split('\n').filter(|l| !l.is_empty()) {
        let words: Vec<String> = line.split(' ').map(|w| w.to_lowercase()).collect();
        captions += 1;
        let n = words.len();
        hist[if n == 0 { 0 } else if n > 300 { 12 } else { (n - 1) / 25 }] += 1;
        all.extend(words);
    }
    all.sort();
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &all {
        *tally.entry(w.as_str()).or_default() += 1;
    }
    let recount_ok = stats.captions == captions
        && stats.total_words == all.len()
        && stats.distinct_words == tally.len()
        && stats.valid_distinct_words == tally.values().filter(|&&c| c > 10).count()
        && stats.acl == all.len() as f64 / captions as f64
        && stats.histogram == hist;
    pass &= recount_ok;
    notes.push(format!("stats vs recount on {captions} captions: {recount_ok}"));

    let fixtures = [("a b\na b c d\n", 3.0, 4), ("The cat\nthe CAT sat\n\nx\n", 2.0, 4), ("one\n", 1.0, 1)];
    let acl_ok = fixtures.iter().all(|(text, acl, distinct)| {
        let s = CorpusStats::from_text(text);
        s.acl == *acl && s.distinct_words == *distinct && s.acl == s.total_words as f64 / s.captions as f64
    });
    pass &= acl_ok;
    notes.push(format!("ACL hand fixtures: {acl_ok}"));
    verdict(pass, notes.join("; "))
}

fn main() {
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored;
    // `--list` reports no tests so tooling that enumerates tests is happy.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let mut results: Vec<(u8, Verdict, f64)> = Vec::new();
    let mut record = |id: u8, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {id:>2}: {} | {} [{secs:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        let _ = std::io::stdout().flush();
        results.push((id, v, secs));
    };
    record(1, &mut criterion_1);
    record(2, &mut criterion_2);
    record(3, &mut criterion_3);
    record(4, &mut criterion_4);
    let base = train_base(dir.path());
    record(5, &mut || criterion_5(dir.path(), &base));
    record(6, &mut || criterion_6(dir.path(), &base));
    record(7, &mut || criterion_7(dir.path(), &base));
    record(8, &mut || criterion_8(dir.path()));
    record(9, &mut || criterion_9(dir.path()));
    record(10, &mut || criterion_10(dir.path()));
    let failed: Vec<u8> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
